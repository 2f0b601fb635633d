//! `PFNN` checkpoint files.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic      4 bytes  "PFNN"
//! version    u16      1
//! flags      u16      0 (reserved)
//! init_seed  u64      seed the weights were initialized from
//! input_dim  u32
//! n_layers   u32
//! layer table, n_layers entries:
//!   tag u8: 0 dense (inputs, outputs)
//!           1 conv2d (in_channels, out_channels, kernel, height, width)
//!           2 relu
//!           3 flatten
//!   followed by the listed u32 fields
//! per weight layer, in order:
//!   n_weights u32
//!   mask      ceil(n_weights / 8) bytes, bit i of byte k is coordinate 8k + i
//!   weights   n_weights × f64
//!   n_bias    u32
//!   bias      n_bias × f64
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{LayerParams, LayerSpec, MaskedParams, Network};

pub const MAGIC: [u8; 4] = *b"PFNN";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub params: MaskedParams,
    pub init_seed: u64,
}

impl Checkpoint {
    pub fn new(network: Network, params: MaskedParams, init_seed: u64) -> Result<Self> {
        let caps = network.layer_capacities();
        if caps != params.layer_capacities() {
            return Err(Error::Checkpoint("parameters do not match the network".into()));
        }
        Ok(Self { network, params, init_seed })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&self.init_seed.to_le_bytes());
        put_u32(&mut out, self.network.input_dim)?;
        put_u32(&mut out, self.network.layers.len())?;
        for layer in &self.network.layers {
            match *layer {
                LayerSpec::Dense { inputs, outputs } => {
                    out.push(0);
                    put_u32(&mut out, inputs)?;
                    put_u32(&mut out, outputs)?;
                }
                LayerSpec::Conv2d { in_channels, out_channels, kernel, height, width } => {
                    out.push(1);
                    for v in [in_channels, out_channels, kernel, height, width] {
                        put_u32(&mut out, v)?;
                    }
                }
                LayerSpec::Relu => out.push(2),
                LayerSpec::Flatten => out.push(3),
            }
        }
        for layer in &self.params.layers {
            put_u32(&mut out, layer.weights.len())?;
            let mut bits = vec![0u8; layer.mask.len().div_ceil(8)];
            for (i, _) in layer.mask.iter().enumerate().filter(|(_, m)| **m) {
                bits[i / 8] |= 1 << (i % 8);
            }
            out.extend_from_slice(&bits);
            layer.weights.iter().for_each(|w| out.extend_from_slice(&w.to_le_bytes()));
            put_u32(&mut out, layer.bias.len())?;
            layer.bias.iter().for_each(|b| out.extend_from_slice(&b.to_le_bytes()));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::BadMagic {
                what: "checkpoint",
                found: u32::from_le_bytes(magic.try_into().expect("4 bytes")),
                expected: u32::from_le_bytes(MAGIC),
            });
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let _flags = r.u16()?;
        let init_seed = r.u64()?;
        let input_dim = r.u32()?;
        let n_layers = r.u32()?;
        let mut layers = Vec::with_capacity(n_layers.min(1024));
        for _ in 0..n_layers {
            let spec = match r.u8()? {
                0 => LayerSpec::Dense { inputs: r.u32()?, outputs: r.u32()? },
                1 => LayerSpec::Conv2d {
                    in_channels: r.u32()?,
                    out_channels: r.u32()?,
                    kernel: r.u32()?,
                    height: r.u32()?,
                    width: r.u32()?,
                },
                2 => LayerSpec::Relu,
                3 => LayerSpec::Flatten,
                tag => return Err(Error::Checkpoint(format!("unknown layer tag {tag}"))),
            };
            layers.push(spec);
        }
        let network = Network::new(input_dim, layers)?;
        let mut params = Vec::new();
        for cap in network.layer_capacities() {
            let n = r.u32()?;
            if n != cap {
                return Err(Error::Checkpoint(format!("layer stores {n} weights, architecture needs {cap}")));
            }
            let bits = r.take(n.div_ceil(8))?;
            let mask = (0..n).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
            let weights = r.f64s(n)?;
            let nb = r.u32()?;
            let bias = r.f64s(nb)?;
            params.push(LayerParams { weights, mask, bias });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let params = MaskedParams { layers: params };
        let outputs: Vec<usize> = network
            .layers
            .iter()
            .filter_map(|l| match *l {
                LayerSpec::Dense { outputs, .. } => Some(outputs),
                LayerSpec::Conv2d { out_channels, .. } => Some(out_channels),
                _ => None,
            })
            .collect();
        if params.layers.iter().zip(&outputs).any(|(l, o)| l.bias.len() != *o) {
            return Err(Error::Checkpoint("bias length does not match layer outputs".into()));
        }
        Ok(Self { network, params, init_seed })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len()).ok_or(Error::Truncated {
            what: "checkpoint",
            expected: self.pos.saturating_add(n) as u64,
            found: self.bytes.len() as u64,
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        let net = Network::new(
            2 * 5 * 5,
            vec![
                LayerSpec::Conv2d { in_channels: 2, out_channels: 3, kernel: 3, height: 5, width: 5 },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: 27, outputs: 4 },
            ],
        )
        .unwrap();
        let mut params = net.init(11);
        let mask: Vec<bool> = (0..params.capacity()).map(|i| i % 3 != 0).collect();
        params.apply_mask(&mask).unwrap();
        params.layers[0].bias[1] = -0.25;
        Checkpoint::new(net, params, 11).unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"PFNN");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 11);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 50);
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 4);
        assert_eq!(bytes[24], 1);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_damage() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::BadMagic { .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Truncated { .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::Checkpoint(_))));
        let mut version = bytes;
        version[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&version), Err(Error::Checkpoint(_))));
    }

    proptest! {
        #[test]
        fn arbitrary_bits_survive(
            sizes in proptest::collection::vec(1usize..9, 2..5),
            seed in any::<u64>(),
            raw in proptest::collection::vec(any::<u64>(), 0..400),
        ) {
            let net = Network::mlp(&sizes).unwrap();
            let mut params = net.init(seed);
            let mut it = raw.iter().cycle();
            for layer in &mut params.layers {
                for (w, m) in layer.weights.iter_mut().zip(&mut layer.mask) {
                    // any bit pattern, including NaN payloads and signed zeros
                    let bits = it.next().copied().unwrap_or(seed);
                    *w = f64::from_bits(bits);
                    *m = bits & 1 == 0;
                }
            }
            let ck = Checkpoint::new(net, params, seed).unwrap();
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
            let a: Vec<u64> = ck.params.flat_weights().iter().map(|w| w.to_bits()).collect();
            let b: Vec<u64> = back.params.flat_weights().iter().map(|w| w.to_bits()).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!(back.params.flat_mask(), ck.params.flat_mask());
        }
    }
}
