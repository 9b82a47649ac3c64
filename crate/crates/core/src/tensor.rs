//! Dense numeric kernels shared by the rest of the crate.
//!
//! Storage is `f32`, row-major. Reductions and statistics accumulate in `f64`.
//!
//! All randomness goes through [`Rng`] (ChaCha8, seeded from a `u64`). A run
//! has one master seed; every consumer derives its own child stream with
//! [`derive_seed`] so that, e.g., dropout masks do not shift when the number
//! of shuffles upstream changes.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The one PRNG used throughout: ChaCha with 8 rounds. Its output stream is
/// specified independently of platform and word size.
pub type Rng = ChaCha8Rng;

/// Builds an [`Rng`] from a 64-bit seed.
pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a master seed, a purpose label and an index.
///
/// The purpose label is hashed with FNV-1a, so the mapping is stable across
/// builds and platforms.
pub fn derive_seed(master: u64, purpose: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(splitmix64(master ^ h).wrapping_add(splitmix64(index)))
}

/// Shorthand for `rng_from_seed(derive_seed(..))`.
pub fn child_rng(master: u64, purpose: &str, index: u64) -> Rng {
    rng_from_seed(derive_seed(master, purpose, index))
}

/// A uniformly random permutation of `0..n` (Fisher-Yates).
pub fn seeded_shuffle(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    perm
}

/// Numerically stable softmax (max subtraction), computed in `f64`.
pub fn softmax(logits: &[f32]) -> Result<Vec<f32>> {
    if logits.is_empty() {
        return Err(Error::Empty("softmax"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax input"));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Softmax over a finite, non-empty slice, in place.
pub(crate) fn softmax_in_place(v: &mut [f32]) {
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    let mut exps = Vec::with_capacity(v.len());
    for &x in v.iter() {
        let e = (f64::from(x) - f64::from(max)).exp();
        sum += e;
        exps.push(e);
    }
    for (o, e) in v.iter_mut().zip(exps) {
        *o = (e / sum) as f32;
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Arithmetic mean with an `f64` accumulator. Empty input is an error.
pub fn mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("mean"));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Median (average of the two middle elements for even lengths).
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("median"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Ok(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

/// Dense row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        let expected = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::InvalidArgument(format!("{rows}x{cols} overflows")))?;
        if data.len() != expected {
            return Err(Error::shape("Matrix::new", expected, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix data"));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("Matrix::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Matrix::new(rows.len(), cols, data)
    }

    /// Internal constructor that skips the finiteness scan.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub(crate) fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> + '_ {
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix::from_raw(idx.len(), self.cols, data)
    }

    /// Stacks matrices vertically. All parts must share a column count.
    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = match parts.first() {
            Some(m) => m.cols,
            None => return Err(Error::Empty("vstack")),
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for m in parts {
            if m.cols != cols {
                return Err(Error::shape("vstack", cols, m.cols));
            }
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        Ok(Matrix::from_raw(rows, cols, data))
    }

    /// Concatenates matrices column-wise. All parts must share a row count.
    pub fn hstack(parts: &[&Matrix]) -> Result<Matrix> {
        let rows = match parts.first() {
            Some(m) => m.rows,
            None => return Err(Error::Empty("hstack")),
        };
        if let Some(bad) = parts.iter().find(|m| m.rows != rows) {
            return Err(Error::shape("hstack", rows, bad.rows));
        }
        let cols: usize = parts.iter().map(|m| m.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for m in parts {
                data.extend_from_slice(m.row(r));
            }
        }
        Ok(Matrix::from_raw(rows, cols, data))
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::shape("matmul", self.cols, rhs.rows));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            let out_row = &mut out.data[r * rhs.cols..(r + 1) * rhs.cols];
            for (k, &a) in self.row(r).iter().enumerate() {
                if a != 0.0 {
                    axpy(a, rhs.row(k), out_row);
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut data = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Matrix::from_raw(self.cols, self.rows, data)
    }

    /// Index of the maximum of every row.
    pub fn argmax_rows(&self) -> Vec<usize> {
        self.iter_rows().map(argmax).collect()
    }

    /// Per-column mean and sample variance (n - 1 denominator), in `f64`.
    pub fn column_moments(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        if self.rows < 2 {
            return Err(Error::InvalidArgument(format!(
                "column variance needs at least 2 rows, got {}",
                self.rows
            )));
        }
        let n = self.rows as f64;
        let mut mean = vec![0.0f64; self.cols];
        for row in self.iter_rows() {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += f64::from(v);
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0f64; self.cols];
        for row in self.iter_rows() {
            for ((s, &v), m) in var.iter_mut().zip(row).zip(&mean) {
                let d = f64::from(v) - m;
                *s += d * d;
            }
        }
        var.iter_mut().for_each(|s| *s /= n - 1.0);
        Ok((mean, var))
    }
}

/// `y += a * x`
#[inline]
pub(crate) fn axpy(a: f32, x: &[f32], y: &mut [f32]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub(crate) fn dot(x: &[f32], y: &[f32]) -> f32 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_symmetric() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_large_logit_does_not_overflow() {
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-6);
        assert!(p[1].abs() < 1e-6);
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    #[allow(clippy::excessive_precision)]
    fn softmax_matches_high_precision_values() {
        // e^x / sum e^x for x = 1, 2, 3, evaluated to 20 digits with mpmath.
        let expected = [
            0.090_030_573_170_380_458_f64,
            0.244_728_471_054_797_652,
            0.665_240_955_774_821_890,
        ];
        let p = softmax(&[1.0, 2.0, 3.0]).unwrap();
        for (a, b) in p.iter().zip(expected) {
            assert!((f64::from(*a) - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(softmax(&[f32::NAN, 0.0]), Err(Error::NonFinite(_))));
        assert!(matches!(softmax(&[f32::INFINITY]), Err(Error::NonFinite(_))));
        assert!(matches!(softmax(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn shuffle_edge_cases() {
        let mut rng = rng_from_seed(1);
        assert!(seeded_shuffle(0, &mut rng).is_empty());
        assert_eq!(seeded_shuffle(1, &mut rng), vec![0]);
    }

    #[test]
    fn shuffle_is_deterministic() {
        let a = seeded_shuffle(10, &mut rng_from_seed(42));
        let b = seeded_shuffle(10, &mut rng_from_seed(42));
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn derived_seeds_differ_by_purpose_and_index() {
        let a = derive_seed(7, "dropout", 0);
        assert_eq!(a, derive_seed(7, "dropout", 0));
        assert_ne!(a, derive_seed(7, "dropout", 1));
        assert_ne!(a, derive_seed(7, "shuffle", 0));
        assert_ne!(a, derive_seed(8, "dropout", 0));
    }

    #[test]
    fn empty_reductions_are_errors() {
        assert!(mean(&[]).is_err());
        assert!(median(&[]).is_err());
        assert!(Matrix::zeros(1, 3).column_moments().is_err());
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]).unwrap(), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]).unwrap(), 2.5);
    }

    #[test]
    fn matrix_rejects_bad_shapes_and_nan() {
        assert!(Matrix::new(2, 2, vec![0.0; 3]).is_err());
        assert!(Matrix::new(1, 2, vec![0.0, f32::NAN]).is_err());
    }

    #[test]
    fn matmul_small() {
        let a = Matrix::new(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Matrix::new(3, 2, vec![7., 8., 9., 10., 11., 12.]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
        assert_eq!(a.transpose().transpose(), a);
    }

    #[test]
    fn stacking() {
        let a = Matrix::new(1, 2, vec![1., 2.]).unwrap();
        let b = Matrix::new(1, 1, vec![3.]).unwrap();
        assert_eq!(Matrix::hstack(&[&a, &b]).unwrap().data(), &[1., 2., 3.]);
        assert!(Matrix::vstack(&[&a, &b]).is_err());
        let v = Matrix::vstack(&[&a, &a]).unwrap();
        assert_eq!((v.rows(), v.cols()), (2, 2));
    }

    proptest! {
        #[test]
        fn softmax_is_simplex_and_permutation_equivariant(
            v in prop::collection::vec(-50.0f32..50.0, 1..12),
            seed in any::<u64>(),
        ) {
            let p = softmax(&v).unwrap();
            let sum: f64 = p.iter().map(|&x| f64::from(x)).sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            prop_assert!(p.iter().all(|&x| x >= 0.0));

            let perm = seeded_shuffle(v.len(), &mut rng_from_seed(seed));
            let permuted: Vec<f32> = perm.iter().map(|&i| v[i]).collect();
            let pp = softmax(&permuted).unwrap();
            for (j, &i) in perm.iter().enumerate() {
                prop_assert!((pp[j] - p[i]).abs() <= 1e-7);
            }
        }
    }
}
