//! Dense and sparse 2-D matrices, sparse × dense multiplication, and the
//! byte-level storage model used for communication accounting.
//!
//! Values are held as `f64` in memory. Byte accounting assumes the wire
//! representation: 32-bit values, 16-bit row/column indices, one bit per entry
//! for the bitmap layout.

use crate::error::{Error, Result};

/// Bytes per parameter value on the wire.
pub const VALUE_BYTES: u64 = 4;
/// Bytes per row or column index in the coordinate-tuple layout.
pub const INDEX_BYTES: u64 = 2;
/// Per-matrix header (rows, cols, layout tag) excluded from the ratio model.
pub const HEADER_BYTES: u64 = 12;
/// Largest dimension addressable with 16-bit indices.
pub const MAX_TUPLE_DIM: usize = u16::MAX as usize;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{}x{} matrix needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                values.len()
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, values: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn nonzero_count(&self) -> usize {
        self.values.iter().filter(|v| **v != 0.0).count()
    }

    /// Plain triple-loop product, used as the reference for [`spmm`].
    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        check_inner(self.rows, self.cols, other.rows, other.cols)?;
        let n = other.cols;
        let mut out = vec![0.0; self.rows * n];
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.values[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let row = &other.values[k * n..(k + 1) * n];
                for (o, b) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                    *o += a * b;
                }
            }
        }
        DenseMatrix::new(self.rows, n, out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SparseLayout {
    /// One presence bit per entry plus the nonzero values.
    Bitmap,
    /// `(row, col, value)` for every nonzero.
    CoordTuple,
}

#[derive(Debug, Clone, PartialEq)]
enum Storage {
    Bitmap { bits: Vec<u64>, values: Vec<f64> },
    CoordTuple { row_idx: Vec<u16>, col_idx: Vec<u16>, values: Vec<f64> },
}

/// Sparse matrix with entries kept in row-major order and no stored zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    storage: Storage,
}

impl SparseMatrix {
    /// Converts with the layout that [`storage_cost`] reports as cheaper.
    /// Matrices too large for 16-bit indices always use the bitmap layout.
    pub fn from_dense(m: &DenseMatrix) -> Self {
        let report = storage_cost(m.values.len() as u64, m.nonzero_count() as u64);
        let layout = if m.rows > MAX_TUPLE_DIM || m.cols > MAX_TUPLE_DIM {
            SparseLayout::Bitmap
        } else {
            report.chosen_layout
        };
        Self::with_layout(m, layout).expect("layout fits matrix dimensions")
    }

    pub fn with_layout(m: &DenseMatrix, layout: SparseLayout) -> Result<Self> {
        let storage = match layout {
            SparseLayout::Bitmap => {
                let mut bits = vec![0u64; m.values.len().div_ceil(64)];
                let mut values = Vec::new();
                for (i, &v) in m.values.iter().enumerate() {
                    if v != 0.0 {
                        bits[i / 64] |= 1 << (i % 64);
                        values.push(v);
                    }
                }
                Storage::Bitmap { bits, values }
            }
            SparseLayout::CoordTuple => {
                if m.rows > MAX_TUPLE_DIM || m.cols > MAX_TUPLE_DIM {
                    return Err(Error::Shape(format!(
                        "{}x{} exceeds 16-bit coordinate indices",
                        m.rows, m.cols
                    )));
                }
                let mut row_idx = Vec::new();
                let mut col_idx = Vec::new();
                let mut values = Vec::new();
                for (i, &v) in m.values.iter().enumerate() {
                    if v != 0.0 {
                        row_idx.push((i / m.cols) as u16);
                        col_idx.push((i % m.cols) as u16);
                        values.push(v);
                    }
                }
                Storage::CoordTuple { row_idx, col_idx, values }
            }
        };
        Ok(Self { rows: m.rows, cols: m.cols, storage })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn layout(&self) -> SparseLayout {
        match self.storage {
            Storage::Bitmap { .. } => SparseLayout::Bitmap,
            Storage::CoordTuple { .. } => SparseLayout::CoordTuple,
        }
    }

    pub fn nonzero_count(&self) -> usize {
        match &self.storage {
            Storage::Bitmap { values, .. } | Storage::CoordTuple { values, .. } => values.len(),
        }
    }

    /// Nonzeros as `(row, col, value)` in row-major order.
    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::with_capacity(self.nonzero_count());
        self.for_each_nonzero(|r, c, v| out.push((r, c, v)));
        out
    }

    fn for_each_nonzero(&self, mut f: impl FnMut(usize, usize, f64)) {
        match &self.storage {
            Storage::Bitmap { bits, values } => {
                let mut next = values.iter();
                for (w, &word) in bits.iter().enumerate() {
                    let mut word = word;
                    while word != 0 {
                        let b = word.trailing_zeros() as usize;
                        word &= word - 1;
                        let flat = w * 64 + b;
                        let v = *next.next().expect("bitmap and values agree");
                        f(flat / self.cols, flat % self.cols, v);
                    }
                }
            }
            Storage::CoordTuple { row_idx, col_idx, values } => {
                for ((&r, &c), &v) in row_idx.iter().zip(col_idx).zip(values) {
                    f(r as usize, c as usize, v);
                }
            }
        }
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, self.cols);
        let cols = self.cols;
        self.for_each_nonzero(|r, c, v| out.values[r * cols + c] = v);
        out
    }

    pub fn storage_report(&self) -> StorageReport {
        storage_cost((self.rows * self.cols) as u64, self.nonzero_count() as u64)
    }
}

/// `s × d`. Work is proportional to the nonzeros of `s` times `d.cols()`.
pub fn spmm(s: &SparseMatrix, d: &DenseMatrix) -> Result<DenseMatrix> {
    check_inner(s.rows, s.cols, d.rows, d.cols)?;
    let n = d.cols;
    let mut out = vec![0.0; s.rows * n];
    s.for_each_nonzero(|r, k, v| {
        let src = &d.values[k * n..(k + 1) * n];
        for (o, b) in out[r * n..(r + 1) * n].iter_mut().zip(src) {
            *o += v * b;
        }
    });
    DenseMatrix::new(s.rows, n, out)
}

fn check_inner(m: usize, k1: usize, k2: usize, n: usize) -> Result<()> {
    if k1 != k2 {
        return Err(Error::Shape(format!(
            "cannot multiply {m}x{k1} by {k2}x{n}: inner dimensions differ"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StorageReport {
    pub dense_bytes: u64,
    pub sparse_bytes: u64,
    pub bitmap_bytes: u64,
    pub tuple_bytes: u64,
    pub density: f64,
    pub chosen_layout: SparseLayout,
}

impl StorageReport {
    /// `sparse_bytes / dense_bytes`, header excluded. Zero for an empty matrix.
    pub fn ratio(&self) -> f64 {
        if self.dense_bytes == 0 {
            0.0
        } else {
            self.sparse_bytes as f64 / self.dense_bytes as f64
        }
    }

    /// Bytes including the fixed per-matrix header.
    pub fn sparse_bytes_with_header(&self) -> u64 {
        self.sparse_bytes + HEADER_BYTES
    }
}

/// Wire size of a matrix with `total` entries of which `nonzero` are kept.
///
/// The tuple layout wins only when strictly cheaper, so the crossover at
/// density 1/32 resolves to the bitmap.
pub fn storage_cost(total: u64, nonzero: u64) -> StorageReport {
    assert!(nonzero <= total, "nonzero count {nonzero} exceeds total {total}");
    let tuple_bytes = nonzero * (VALUE_BYTES + 2 * INDEX_BYTES);
    let bitmap_bytes = total.div_ceil(8) + nonzero * VALUE_BYTES;
    let (sparse_bytes, chosen_layout) = if tuple_bytes < bitmap_bytes {
        (tuple_bytes, SparseLayout::CoordTuple)
    } else {
        (bitmap_bytes, SparseLayout::Bitmap)
    };
    StorageReport {
        dense_bytes: total * VALUE_BYTES,
        sparse_bytes,
        bitmap_bytes,
        tuple_bytes,
        density: if total == 0 { 0.0 } else { nonzero as f64 / total as f64 },
        chosen_layout,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dense(rng: &mut ChaCha8Rng, rows: usize, cols: usize, zero_frac: f64) -> DenseMatrix {
        let values = (0..rows * cols)
            .map(|_| if rng.random::<f64>() < zero_frac { 0.0 } else { rng.random_range(-1.0..1.0) })
            .collect();
        DenseMatrix::new(rows, cols, values).unwrap()
    }

    #[test]
    fn zero_matrix_has_no_nonzeros() {
        let s = SparseMatrix::from_dense(&DenseMatrix::zeros(3, 3));
        assert_eq!(s.nonzero_count(), 0);
        assert_eq!(s.to_dense(), DenseMatrix::zeros(3, 3));
    }

    #[test]
    fn identity_triplets() {
        let s = SparseMatrix::from_dense(&DenseMatrix::identity(3));
        assert_eq!(s.triplets(), vec![(0, 0, 1.0), (1, 1, 1.0), (2, 2, 1.0)]);
    }

    #[test]
    fn round_trip_with_forty_percent_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_dense(&mut rng, 8, 5, 0.4);
        for layout in [SparseLayout::Bitmap, SparseLayout::CoordTuple] {
            assert_eq!(SparseMatrix::with_layout(&m, layout).unwrap().to_dense(), m);
        }
        assert_eq!(SparseMatrix::from_dense(&m).to_dense(), m);
    }

    #[test]
    fn spmm_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = random_dense(&mut rng, 4, 3, 0.0);
        let id = SparseMatrix::from_dense(&DenseMatrix::identity(4));
        assert_eq!(spmm(&id, &d).unwrap(), d);
        let zero = SparseMatrix::from_dense(&DenseMatrix::zeros(4, 4));
        assert_eq!(spmm(&zero, &d).unwrap(), DenseMatrix::zeros(4, 3));
    }

    #[test]
    fn spmm_matches_dense_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_dense(&mut rng, 6, 6, 0.7);
        let b = random_dense(&mut rng, 6, 2, 0.0);
        let oracle = naive_product(&a, &b);
        for layout in [SparseLayout::Bitmap, SparseLayout::CoordTuple] {
            let got = spmm(&SparseMatrix::with_layout(&a, layout).unwrap(), &b).unwrap();
            for (x, y) in got.values().iter().zip(&oracle) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn spmm_rejects_mismatched_dims() {
        let s = SparseMatrix::from_dense(&DenseMatrix::identity(3));
        assert!(matches!(spmm(&s, &DenseMatrix::zeros(4, 2)), Err(Error::Shape(_))));
    }

    #[test]
    fn tuple_layout_rejects_wide_matrices() {
        let m = DenseMatrix::zeros(1, MAX_TUPLE_DIM + 1);
        assert!(SparseMatrix::with_layout(&m, SparseLayout::CoordTuple).is_err());
        assert_eq!(SparseMatrix::from_dense(&m).layout(), SparseLayout::Bitmap);
    }

    #[test]
    fn storage_half_density() {
        let r = storage_cost(3200, 1600);
        assert_eq!(r.ratio(), 0.53125);
        assert_eq!(r.chosen_layout, SparseLayout::Bitmap);
    }

    #[test]
    fn storage_tie_at_one_thirty_second() {
        let r = storage_cost(3200, 100);
        assert_eq!(r.bitmap_bytes, r.tuple_bytes);
        assert_eq!(r.ratio(), 1.0 / 16.0);
        assert_eq!(r.chosen_layout, SparseLayout::Bitmap);
    }

    #[test]
    fn storage_very_sparse_prefers_tuples() {
        let r = storage_cost(100_000, 100);
        // bitmap: 12500 + 400 bytes, tuples: 800 bytes
        assert_eq!(r.bitmap_bytes, 12_900);
        assert_eq!(r.tuple_bytes, 800);
        assert_eq!(r.ratio(), 0.002);
        assert_eq!(r.chosen_layout, SparseLayout::CoordTuple);
    }

    fn naive_product(a: &DenseMatrix, b: &DenseMatrix) -> Vec<f64> {
        let mut out = vec![0.0; a.rows() * b.cols()];
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                out[i * b.cols() + j] = (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum();
            }
        }
        out
    }

    proptest! {
        #[test]
        fn prop_round_trip_bitwise(rows in 1usize..20, cols in 1usize..20, seed: u64, zf in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_dense(&mut rng, rows, cols, zf);
            prop_assert_eq!(SparseMatrix::from_dense(&m).to_dense(), m);
        }

        #[test]
        fn prop_spmm_agrees(m in 1usize..64, k in 1usize..64, n in 1usize..16, seed: u64, zf in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_dense(&mut rng, m, k, zf);
            let b = random_dense(&mut rng, k, n, 0.0);
            let got = spmm(&SparseMatrix::from_dense(&a), &b).unwrap();
            for (x, y) in got.values().iter().zip(naive_product(&a, &b)) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn prop_cost_formulas(total in 0u64..=1_000_000, frac in 0.0f64..=1.0) {
            let nonzero = ((total as f64) * frac) as u64;
            let r = storage_cost(total, nonzero);
            let tuple = 8 * nonzero;
            let bitmap = total.div_ceil(8) + 4 * nonzero;
            prop_assert_eq!(r.sparse_bytes, tuple.min(bitmap));
            // layout switch: tuples iff density < 1/32, i.e. 32 * nonzero < total
            // (exact when total is a multiple of 8)
            if total % 8 == 0 {
                prop_assert_eq!(r.chosen_layout == SparseLayout::CoordTuple, 32 * nonzero < total);
            }
        }
    }
}
