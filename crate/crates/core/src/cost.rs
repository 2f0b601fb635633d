//! Round-time model `T(M) = c + Σ_{j∈M} t_j` and byte accounting.
//!
//! Per-parameter compute time is shared by every coordinate of a layer. The
//! communication part is derived from bytes exchanged and a bandwidth; a
//! model fitted from measured round times folds communication into the
//! per-layer coefficients and carries an infinite bandwidth.

use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::{storage_cost, VALUE_BYTES};

/// Lower bound for fitted per-parameter coefficients.
pub const COEFFICIENT_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    pub c_seconds: f64,
    #[serde(rename = "bandwidth_Bps")]
    pub bandwidth_bps: f64,
    pub t_per_layer: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoundKind {
    Normal,
    /// The server recomputes the mask; `new_kept` is the size of the new model.
    Reconfig { new_kept: usize },
}

/// Bytes exchanged by one client in one round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CommBytes {
    pub upload: u64,
    pub download: u64,
}

impl CommBytes {
    pub fn total(&self) -> u64 {
        self.upload + self.download
    }
}

/// Normal rounds exchange kept values only; a reconfiguration uploads the
/// full-space importance vector and downloads the new sparse model.
pub fn comm_bytes(kept: usize, capacity: usize, kind: RoundKind) -> CommBytes {
    match kind {
        RoundKind::Normal => {
            let values = VALUE_BYTES * kept as u64;
            CommBytes { upload: values, download: values }
        }
        RoundKind::Reconfig { new_kept } => CommBytes {
            upload: VALUE_BYTES * capacity as u64,
            download: storage_cost(capacity as u64, new_kept as u64).sparse_bytes,
        },
    }
}

/// Average per-round traffic, as a fraction of the dense model size, when a
/// reconfiguration (full upload, density-`d` download) happens once every
/// `interval` rounds and all other rounds exchange `d` in each direction.
pub fn amortized_comm_fraction(density: f64, interval: u32) -> f64 {
    let n = interval as f64;
    ((1.0 + density) + 2.0 * (n - 1.0) * density) / n
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_seconds >= 0.0) {
            return Err(Error::InvalidArgument("c_seconds must be non-negative".into()));
        }
        if !(self.bandwidth_bps > 0.0) {
            return Err(Error::InvalidArgument("bandwidth_Bps must be positive".into()));
        }
        if self.t_per_layer.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::InvalidArgument("every t_per_layer entry must be positive".into()));
        }
        Ok(())
    }

    pub fn check_layers(&self, layers: usize) -> Result<()> {
        if self.t_per_layer.len() != layers {
            return Err(Error::InvalidArgument(format!(
                "cost model has {} layer coefficients, network has {layers} weight layers",
                self.t_per_layer.len()
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let value: toml::Value = text.parse::<toml::Table>().map(toml::Value::Table).map_err(|e| Error::Config {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let cm: CostModel = crate::config::deserialize_value(value)?;
        cm.validate()?;
        Ok(cm)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("cost model serializes")
    }

    /// Local computation only: `c + Σ_ℓ t_ℓ · kept_ℓ`.
    pub fn compute_time(&self, kept_per_layer: &[usize]) -> f64 {
        self.c_seconds + self.t_per_layer.iter().zip(kept_per_layer).map(|(t, k)| t * *k as f64).sum::<f64>()
    }

    pub fn round_time(&self, kept_per_layer: &[usize], capacity: usize, kind: RoundKind) -> f64 {
        let kept = kept_per_layer.iter().sum();
        let bytes = comm_bytes(kept, capacity, kind).total();
        self.compute_time(kept_per_layer) + bytes as f64 / self.bandwidth_bps
    }

    /// Marginal normal-round time of one kept coordinate in `layer`,
    /// including its upload and download.
    pub fn coordinate_cost(&self, layer: usize) -> f64 {
        self.t_per_layer[layer] + (2 * VALUE_BYTES) as f64 / self.bandwidth_bps
    }

    /// Per-coordinate linear round-time model for a given layer assignment.
    pub fn linear_set_cost(&self, coordinate_layers: &[usize]) -> LinearSetCost {
        LinearSetCost {
            c: self.c_seconds,
            t: coordinate_layers.iter().map(|&l| self.coordinate_cost(l)).collect(),
        }
    }
}

/// A monotone, positive round-time function over sets of coordinates.
pub trait SetCost {
    /// `set` is sorted ascending and duplicate-free.
    fn cost(&self, set: &[usize]) -> f64;

    /// `T(set ∪ {j}) − T(set)` for `j ∉ set`.
    fn marginal(&self, set: &[usize], j: usize) -> f64 {
        let mut with = set.to_vec();
        let pos = with.partition_point(|&x| x < j);
        with.insert(pos, j);
        self.cost(&with) - self.cost(set)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSetCost {
    pub c: f64,
    pub t: Vec<f64>,
}

impl SetCost for LinearSetCost {
    fn cost(&self, set: &[usize]) -> f64 {
        set.iter().fold(self.c, |acc, &j| acc + self.t[j])
    }

    fn marginal(&self, _set: &[usize], j: usize) -> f64 {
        self.t[j]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingSample {
    pub kept_per_layer: Vec<usize>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub model: CostModel,
    pub r_squared: f64,
    /// Layers whose coefficient hit [`COEFFICIENT_FLOOR`].
    pub clamped_layers: Vec<usize>,
}

/// Least-squares fit of `seconds ≈ c + Σ t_ℓ kept_ℓ`.
///
/// Coefficients that come out below the floor (and layers whose counts are
/// zero in every sample) are pinned to the floor and the remaining ones are
/// refit. A negative intercept is pinned to zero the same way.
pub fn fit(samples: &[TimingSample]) -> Result<FitReport> {
    let layers = samples.first().map(|s| s.kept_per_layer.len()).unwrap_or(0);
    if samples.len() < layers + 1 || samples.is_empty() {
        return Err(Error::RankDeficient(format!(
            "need at least {} samples for {layers} layers, got {}",
            layers + 1,
            samples.len()
        )));
    }
    if samples.iter().any(|s| s.kept_per_layer.len() != layers) {
        return Err(Error::InvalidArgument("timing samples disagree on layer count".into()));
    }
    if samples.iter().any(|s| !(s.seconds > 0.0)) {
        return Err(Error::InvalidArgument("measured round times must be positive".into()));
    }

    // column 0 is the intercept
    let mut coef = vec![0.0; layers + 1];
    let mut fixed = vec![false; layers + 1];
    for l in 0..layers {
        if samples.iter().all(|s| s.kept_per_layer[l] == 0) {
            fixed[l + 1] = true;
            coef[l + 1] = COEFFICIENT_FLOOR;
        }
    }
    let x = |i: usize, col: usize| -> f64 {
        if col == 0 {
            1.0
        } else {
            samples[i].kept_per_layer[col - 1] as f64
        }
    };

    loop {
        let active: Vec<usize> = (0..=layers).filter(|&c| !fixed[c]).collect();
        let residual_target: Vec<f64> = (0..samples.len())
            .map(|i| samples[i].seconds - (0..=layers).filter(|&c| fixed[c]).map(|c| coef[c] * x(i, c)).sum::<f64>())
            .collect();
        if active.is_empty() {
            break;
        }
        let scales: Vec<f64> = active
            .iter()
            .map(|&c| (0..samples.len()).map(|i| x(i, c).abs()).fold(0.0, f64::max).max(1.0))
            .collect();
        let a = DMatrix::from_fn(samples.len(), active.len(), |i, k| x(i, active[k]) / scales[k]);
        let b = DVector::from_vec(residual_target);
        let svd = a.svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if !(smin > 1e-10 * smax) {
            return Err(Error::RankDeficient(format!(
                "sample design has condition number {:.3e}",
                smax / smin
            )));
        }
        let sol = svd.solve(&b, 0.0).map_err(|e| Error::RankDeficient(e.to_string()))?;
        for (k, &c) in active.iter().enumerate() {
            coef[c] = sol[k] / scales[k];
        }
        let mut changed = false;
        for &c in &active {
            let floor = if c == 0 { 0.0 } else { COEFFICIENT_FLOOR };
            if coef[c] < floor {
                coef[c] = floor;
                fixed[c] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let predict = |i: usize| (0..=layers).map(|c| coef[c] * x(i, c)).sum::<f64>();
    let mean = samples.iter().map(|s| s.seconds).sum::<f64>() / samples.len() as f64;
    let ss_tot: f64 = samples.iter().map(|s| (s.seconds - mean).powi(2)).sum();
    let ss_res: f64 = (0..samples.len()).map(|i| (samples[i].seconds - predict(i)).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else if ss_res <= 1e-24 { 1.0 } else { 0.0 };
    let clamped_layers = (0..layers).filter(|&l| coef[l + 1] <= COEFFICIENT_FLOOR).collect();

    Ok(FitReport {
        model: CostModel { c_seconds: coef[0], bandwidth_bps: f64::INFINITY, t_per_layer: coef[1..].to_vec() },
        r_squared,
        clamped_layers,
    })
}

/// Reads timing samples from CSV: one column of kept counts per layer, then
/// a final `seconds` column. Column names other than the last are free.
pub fn read_timing_csv<R: Read>(input: R) -> Result<Vec<TimingSample>> {
    let mut r = csv::Reader::from_reader(input);
    let width = r.headers()?.len();
    if width < 2 || r.headers()?.get(width - 1) != Some("seconds") {
        return Err(Error::InvalidArgument("timing CSV needs layer columns followed by `seconds`".into()));
    }
    let parse_err = |row: usize, field: &str| Error::InvalidArgument(format!("row {row}: cannot parse `{field}`"));
    r.records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec?;
            let kept_per_layer = rec
                .iter()
                .take(width - 1)
                .map(|f| f.trim().parse::<usize>().map_err(|_| parse_err(i + 1, f)))
                .collect::<Result<Vec<_>>>()?;
            let last = &rec[width - 1];
            let seconds = last.trim().parse::<f64>().map_err(|_| parse_err(i + 1, last))?;
            Ok(TimingSample { kept_per_layer, seconds })
        })
        .collect()
}
