//! TOML loading with key-path error reporting and `key=value` overrides.

use serde::de::DeserializeOwned;
use toml::{Table, Value};

use crate::error::{Error, Result};

/// Deserializes `value`, reporting failures with the offending key path.
pub fn deserialize_value<T: DeserializeOwned>(value: Value) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        Error::Config { path, message: e.into_inner().to_string() }
    })
}

pub fn parse_table(text: &str, origin: &str) -> Result<Table> {
    text.parse::<Table>().map_err(|e| Error::Config { path: origin.to_string(), message: e.to_string() })
}

/// Applies `a.b.c=value`. The value is read as a TOML literal when it parses
/// as one and as a bare string otherwise.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| Error::Config {
        path: assignment.to_string(),
        message: "override must look like key=value".into(),
    })?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config { path: key.to_string(), message: "empty key segment".into() });
    }
    let mut cursor = table;
    for (i, part) in parts[..parts.len() - 1].iter().enumerate() {
        let entry = cursor.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cursor = entry.as_table_mut().ok_or_else(|| Error::Config {
            path: parts[..=i].join("."),
            message: "not a table".into(),
        })?;
    }
    cursor.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Inner {
        #[allow(dead_code)]
        rate: f64,
    }

    #[derive(Debug, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Outer {
        #[allow(dead_code)]
        inner: Inner,
    }

    #[test]
    fn overrides_create_and_replace() {
        let mut t = parse_table("a = 1\n[b]\nc = \"x\"\n", "test").unwrap();
        apply_override(&mut t, "a=2").unwrap();
        apply_override(&mut t, "b.c=hello").unwrap();
        apply_override(&mut t, "d.e.f=[1, 2]").unwrap();
        assert_eq!(t["a"].as_integer(), Some(2));
        assert_eq!(t["b"]["c"].as_str(), Some("hello"));
        assert_eq!(t["d"]["e"]["f"].as_array().unwrap().len(), 2);
        assert!(apply_override(&mut t, "a.x=1").is_err());
        assert!(apply_override(&mut t, "novalue").is_err());
    }

    #[test]
    fn errors_carry_key_paths() {
        let t = parse_table("[inner]\nrate = 1.0\nbogus = 3\n", "test").unwrap();
        let err = deserialize_value::<Outer>(Value::Table(t)).unwrap_err();
        match err {
            Error::Config { path, message } => {
                assert_eq!(path, "inner.bogus");
                assert!(message.contains("bogus"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
