//! Datasets: seeded synthetic Gaussian clusters, IDX (MNIST-style) files,
//! and client partitioning.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Row-major feature matrix with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub dims: usize,
    pub num_classes: usize,
    /// Per-example shape when the features come from images, e.g. `[28, 28]`.
    pub shape: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn example(&self, i: usize) -> &[f64] {
        &self.features[i * self.dims..(i + 1) * self.dims]
    }

    /// Gathers the listed examples into contiguous buffers.
    pub fn gather(&self, indices: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let mut xs = Vec::with_capacity(indices.len() * self.dims);
        let mut ys = Vec::with_capacity(indices.len());
        for &i in indices {
            xs.extend_from_slice(self.example(i));
            ys.push(self.labels[i]);
        }
        (xs, ys)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dims: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    /// Standard deviation of class means around the origin.
    #[serde(default = "default_separation")]
    pub separation: f64,
    /// Within-class standard deviation.
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_separation() -> f64 {
    1.0
}

fn default_noise() -> f64 {
    1.0
}

/// Gaussian class clusters. Labels cycle through the classes so every split
/// is balanced; means are drawn once per seed and shared by both splits.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SplitDataset> {
    if spec.classes < 2 || spec.dims < 1 {
        return Err(Error::InvalidArgument("synthetic data needs at least 2 classes and 1 dimension".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means: Vec<f64> = (0..spec.classes * spec.dims)
        .map(|_| spec.separation * Distribution::<f64>::sample(&StandardNormal, &mut rng))
        .collect();
    let mut draw = |n: usize| {
        let mut features = Vec::with_capacity(n * spec.dims);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = i % spec.classes;
            let mean = &means[y * spec.dims..(y + 1) * spec.dims];
            features.extend(mean.iter().map(|m| {
                let z: f64 = StandardNormal.sample(&mut rng);
                m + spec.noise * z
            }));
            labels.push(y);
        }
        // shuffle example order so label-sorted views are a real operation
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let ds = Dataset { features, labels, dims: spec.dims, num_classes: spec.classes, shape: vec![spec.dims] };
        let (features, labels) = ds.gather(&order);
        Dataset { features, labels, ..ds }
    };
    let train = draw(spec.n_train);
    let test = draw(spec.n_test);
    Ok(SplitDataset { train, test })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    Iid,
    LabelSkew,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub mode: PartitionMode,
    pub num_clients: usize,
    #[serde(default)]
    pub seed: u64,
    /// Maximum distinct labels per client in label-skew mode.
    #[serde(default = "default_labels_per_client")]
    pub labels_per_client: usize,
}

fn default_labels_per_client() -> usize {
    2
}

/// Splits the example indices of `ds` into disjoint shards covering it.
///
/// IID: seeded shuffle, then equal contiguous cuts with the remainder on the
/// last shard. Label skew: stable sort by label, then equal contiguous cuts;
/// fails if any shard would see more than `labels_per_client` labels.
pub fn partition(ds: &Dataset, spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    let n = ds.len();
    let k = spec.num_clients;
    if k == 0 || k > n {
        return Err(Error::Partition(format!("cannot split {n} examples among {k} clients")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    match spec.mode {
        PartitionMode::Iid => order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed)),
        PartitionMode::LabelSkew => {
            if spec.labels_per_client == 0 || ds.num_classes.div_ceil(k) > spec.labels_per_client {
                return Err(Error::Partition(format!(
                    "{} labels cannot be spread over {k} clients with at most {} labels each",
                    ds.num_classes, spec.labels_per_client
                )));
            }
            order.sort_by_key(|&i| ds.labels[i]);
        }
    }
    let base = n / k;
    let shards: Vec<Vec<usize>> = (0..k)
        .map(|c| {
            let end = if c + 1 == k { n } else { (c + 1) * base };
            order[c * base..end].to_vec()
        })
        .collect();
    if spec.mode == PartitionMode::LabelSkew {
        for (c, shard) in shards.iter().enumerate() {
            let mut labels: Vec<usize> = shard.iter().map(|&i| ds.labels[i]).collect();
            labels.dedup();
            if labels.len() > spec.labels_per_client {
                return Err(Error::Partition(format!(
                    "client {c} would hold {} labels (limit {})",
                    labels.len(),
                    spec.labels_per_client
                )));
            }
        }
    }
    Ok(shards)
}

fn read_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or(Error::Truncated { what, expected: (at + 4) as u64, found: bytes.len() as u64 })
}

/// Parses an IDX image file (`u8` pixels, scaled to `[0, 1]`).
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f64>)> {
    let what = "IDX image file";
    let magic = read_u32(bytes, 0, what)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic { what, found: magic, expected: IDX_IMAGES_MAGIC });
    }
    let n = read_u32(bytes, 4, what)? as usize;
    let rows = read_u32(bytes, 8, what)? as usize;
    let cols = read_u32(bytes, 12, what)? as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() < expected {
        return Err(Error::Truncated { what, expected: expected as u64, found: bytes.len() as u64 });
    }
    let pixels = bytes[16..expected].iter().map(|&p| p as f64 / 255.0).collect();
    Ok((n, rows, cols, pixels))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let what = "IDX label file";
    let magic = read_u32(bytes, 0, what)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic { what, found: magic, expected: IDX_LABELS_MAGIC });
    }
    let n = read_u32(bytes, 4, what)? as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(Error::Truncated { what, expected: expected as u64, found: bytes.len() as u64 });
    }
    Ok(bytes[8..expected].iter().map(|&l| l as usize).collect())
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (n, rows, cols, features) = parse_idx_images(&std::fs::read(images_path)?)?;
    let labels = parse_idx_labels(&std::fs::read(labels_path)?)?;
    if labels.len() != n {
        return Err(Error::CountMismatch { images: n, labels: labels.len() });
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    Ok(Dataset { features, labels, dims: rows * cols, num_classes, shape: vec![rows, cols] })
}

/// Encodes an IDX image file; the inverse of [`parse_idx_images`] for `u8` pixels.
pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
