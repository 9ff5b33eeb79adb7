//! Dense linear algebra and neural-network primitives.
//!
//! Everything is `f64` and row-major. Products accumulate left to right over
//! the inner dimension so results are reproducible bit-for-bit regardless of
//! how many threads participate.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Clamp used by [`inv_sigmoid`] unless a caller supplies its own.
pub const INV_SIGMOID_EPS: f64 = 1e-6;

/// Work size (rows × inner × cols) above which `matmul` splits rows across threads.
const PAR_MATMUL_WORK: usize = 1 << 18;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite matrix entry at index {i}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    /// Entries drawn uniformly from `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Selected rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn vstack(parts: &[Matrix], cols: usize) -> Result<Matrix> {
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::shape(format!("vstack: expected {cols} cols, got {}", p.cols)));
            }
            rows += p.rows;
            data.extend_from_slice(&p.data);
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::shape(format!(
                "add: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Standard matrix product.
///
/// Each output entry accumulates `a[i][k] * b[k][j]` for `k = 0, 1, ...` in
/// order, identical to the textbook triple loop.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(format!(
            "matmul: {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (n, inner, m) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(n, m);
    if m == 0 {
        return Ok(out);
    }
    let row_kernel = |i: usize, out_row: &mut [f64]| {
        let a_row = &a.data[i * inner..(i + 1) * inner];
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = &b.data[k * m..(k + 1) * m];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    };
    if n * inner * m >= PAR_MATMUL_WORK {
        out.data
            .par_chunks_mut(m)
            .enumerate()
            .for_each(|(i, row)| row_kernel(i, row));
    } else {
        out.data
            .chunks_mut(m)
            .enumerate()
            .for_each(|(i, row)| row_kernel(i, row));
    }
    Ok(out)
}

/// Boolean attention mask; `true` marks an allowed (row, col) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttnMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    pub fn none(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allowed: vec![false; rows * cols],
        }
    }

    /// Square mask whose diagonal blocks have the given sizes.
    pub fn block_diagonal(group_sizes: &[usize]) -> Self {
        let total: usize = group_sizes.iter().sum();
        let mut mask = Self::none(total, total);
        let mut start = 0;
        for &size in group_sizes {
            for r in start..start + size {
                for c in start..start + size {
                    mask.allowed[r * total + c] = true;
                }
            }
            start += size;
        }
        mask
    }

    /// One row per group; row `g` allows exactly the columns of group `g`.
    pub fn group_rows(group_sizes: &[usize]) -> Self {
        let total: usize = group_sizes.iter().sum();
        let mut mask = Self::none(group_sizes.len(), total);
        let mut start = 0;
        for (g, &size) in group_sizes.iter().enumerate() {
            for c in start..start + size {
                mask.allowed[g * total + c] = true;
            }
            start += size;
        }
        mask
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn is_allowed(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, allowed: bool) {
        self.allowed[r * self.cols + c] = allowed;
    }

    pub fn row_has_allowed(&self, r: usize) -> bool {
        self.allowed[r * self.cols..(r + 1) * self.cols].iter().any(|&a| a)
    }

    pub fn select_rows(&self, idx: &[usize]) -> AttnMask {
        let mut allowed = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            allowed.extend_from_slice(&self.allowed[i * self.cols..(i + 1) * self.cols]);
        }
        AttnMask {
            rows: idx.len(),
            cols: self.cols,
            allowed,
        }
    }
}

/// Row softmax where disallowed entries are excluded from the max and the sum
/// and receive weight exactly zero.
pub fn masked_softmax(scores: &Matrix, mask: &AttnMask) -> Result<Matrix> {
    if scores.rows != mask.rows || scores.cols != mask.cols {
        return Err(Error::shape(format!(
            "mask {}x{} does not match scores {}x{}",
            mask.rows, mask.cols, scores.rows, scores.cols
        )));
    }
    let mut out = Matrix::zeros(scores.rows, scores.cols);
    for r in 0..scores.rows {
        let row = scores.row(r);
        let max = row
            .iter()
            .enumerate()
            .filter(|&(c, _)| mask.is_allowed(r, c))
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow { row: r });
        }
        let out_row = out.row_mut(r);
        let mut sum = 0.0;
        for (c, &v) in row.iter().enumerate() {
            if mask.is_allowed(r, c) {
                let e = (v - max).exp();
                out_row[c] = e;
                sum += e;
            }
        }
        for v in out_row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Scaled dot products `scale * <q_r, k_c>` evaluated only where the mask
/// allows; other entries are left at zero and never read by [`masked_softmax`].
pub fn masked_scores(q: &Matrix, k: &Matrix, mask: &AttnMask, scale: f64) -> Result<Matrix> {
    if q.cols != k.cols || mask.rows != q.rows || mask.cols != k.rows {
        return Err(Error::shape(format!(
            "scores: q {}x{}, k {}x{}, mask {}x{}",
            q.rows, q.cols, k.rows, k.cols, mask.rows, mask.cols
        )));
    }
    let mut out = Matrix::zeros(q.rows, k.rows);
    for r in 0..q.rows {
        let qr = q.row(r);
        for c in 0..k.rows {
            if mask.is_allowed(r, c) {
                let dot: f64 = qr.iter().zip(k.row(c)).map(|(a, b)| a * b).sum();
                out.data[r * k.rows + c] = scale * dot;
            }
        }
    }
    Ok(out)
}

/// `weights · values`, summing only over allowed columns.
pub fn masked_weighted_sum(weights: &Matrix, mask: &AttnMask, values: &Matrix) -> Result<Matrix> {
    if weights.cols != values.rows || mask.rows != weights.rows || mask.cols != weights.cols {
        return Err(Error::shape("weighted sum: inconsistent dimensions"));
    }
    let mut out = Matrix::zeros(weights.rows, values.cols);
    for r in 0..weights.rows {
        for c in 0..weights.cols {
            if !mask.is_allowed(r, c) {
                continue;
            }
            let w = weights.get(r, c);
            let v = values.row(c);
            for (o, &x) in out.row_mut(r).iter_mut().zip(v) {
                *o += w * x;
            }
        }
    }
    Ok(out)
}

/// Per-row normalization to zero mean and unit variance followed by an
/// elementwise affine map.
pub fn layer_norm(x: &Matrix, gain: &[f64], bias: &[f64], eps: f64) -> Result<Matrix> {
    if gain.len() != x.cols || bias.len() != x.cols {
        return Err(Error::shape(format!(
            "layer_norm: {} cols, gain {}, bias {}",
            x.cols,
            gain.len(),
            bias.len()
        )));
    }
    let n = x.cols as f64;
    let mut out = Matrix::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        for (c, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = (row[c] - mean) * inv * gain[c] + bias[c];
        }
    }
    Ok(out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Logit of `p` after clamping to `[eps, 1 - eps]`.
pub fn inv_sigmoid(p: f64, eps: f64) -> f64 {
    let p = p.clamp(eps, 1.0 - eps);
    (p / (1.0 - p)).ln()
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Affine layer `y = x · W + b` with `W` stored as `in × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    /// Uniform initialization in `±1/sqrt(fan_in)` for weights and bias.
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let weight = Matrix::uniform(fan_in, fan_out, bound, rng);
        let bias = (0..fan_out).map(|_| rng.gen_range(-bound..=bound)).collect();
        Self { weight, bias }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Matrix::zeros(fan_in, fan_out),
            bias: vec![0.0; fan_out],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = matmul(x, &self.weight)?;
        for r in 0..y.rows {
            for (v, b) in y.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(y)
    }

    pub fn forward_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        let m = Matrix::from_vec(1, x.len(), x.to_vec())?;
        Ok(self.forward(&m)?.into_data())
    }
}

/// Layer norm parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gain: vec![1.0; dim],
            bias: vec![0.0; dim],
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        layer_norm(x, &self.gain, &self.bias, self.eps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn identity_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Matrix::uniform(3, 4, 2.0, &mut rng);
        assert_eq!(matmul(&Matrix::identity(3), &m).unwrap(), m);
    }

    #[test]
    fn scalar_product() {
        let a = Matrix::from_vec(1, 1, vec![2.0]).unwrap();
        let b = Matrix::from_vec(1, 1, vec![3.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Matrix::uniform(4, 5, 1.0, &mut rng);
        let b = Matrix::uniform(5, 3, 1.0, &mut rng);
        let got = matmul(&a, &b).unwrap();
        let want = naive_matmul(&a, &b);
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_bit_identical_small_and_parallel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 1..=8 {
            let a = Matrix::uniform(n, n, 1.0, &mut rng);
            let b = Matrix::uniform(n, n, 1.0, &mut rng);
            assert_eq!(matmul(&a, &b).unwrap(), naive_matmul(&a, &b));
        }
        // large enough to take the threaded path
        let a = Matrix::uniform(70, 64, 1.0, &mut rng);
        let b = Matrix::uniform(64, 70, 1.0, &mut rng);
        assert_eq!(matmul(&a, &b).unwrap(), naive_matmul(&a, &b));
    }

    #[test]
    fn matmul_shape_error() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn from_vec_rejects_bad_input() {
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn softmax_uniform_row() {
        let s = Matrix::from_vec(1, 3, vec![0.0; 3]).unwrap();
        let p = masked_softmax(&s, &AttnMask::full(1, 3)).unwrap();
        for &v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_single_allowed() {
        let s = Matrix::from_vec(1, 2, vec![5.0, 5.0]).unwrap();
        let mut mask = AttnMask::full(1, 2);
        mask.set(0, 1, false);
        let p = masked_softmax(&s, &mask).unwrap();
        assert_eq!(p.data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let s = Matrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let p = masked_softmax(&s, &AttnMask::full(1, 3)).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, v) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert!((p.get(0, i) - v.exp() / z).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_fully_masked_row_is_error() {
        let s = Matrix::zeros(2, 2);
        let mut mask = AttnMask::full(2, 2);
        mask.set(1, 0, false);
        mask.set(1, 1, false);
        assert!(matches!(
            masked_softmax(&s, &mask),
            Err(Error::DegenerateRow { row: 1 })
        ));
    }

    #[test]
    fn softmax_large_scores_are_stable() {
        let s = Matrix::from_vec(1, 2, vec![1000.0, 999.0]).unwrap();
        let p = masked_softmax(&s, &AttnMask::full(1, 2)).unwrap();
        assert!(p.is_finite());
        assert!((p.get(0, 0) + p.get(0, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_constant_row() {
        let x = Matrix::from_vec(1, 4, vec![3.0; 4]).unwrap();
        let y = layer_norm(&x, &[1.0; 4], &[0.0; 4], 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_already_normalized() {
        let x = Matrix::from_vec(1, 2, vec![1.0, -1.0]).unwrap();
        let y = layer_norm(&x, &[1.0; 2], &[0.0; 2], 0.0).unwrap();
        assert_eq!(y.data(), &[1.0, -1.0]);
    }

    #[test]
    fn layer_norm_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Matrix::uniform(1, 16, 5.0, &mut rng);
        let y = layer_norm(&x, &[1.0; 16], &[0.0; 16], 1e-12).unwrap();
        let mean = y.data().iter().sum::<f64>() / 16.0;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_shape_error() {
        let x = Matrix::zeros(1, 3);
        assert!(layer_norm(&x, &[1.0; 2], &[0.0; 3], 1e-5).is_err());
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(inv_sigmoid(0.5, INV_SIGMOID_EPS), 0.0);
        assert!((sigmoid(inv_sigmoid(0.73, INV_SIGMOID_EPS)) - 0.73).abs() < 1e-9);
        assert!(inv_sigmoid(0.0, INV_SIGMOID_EPS).is_finite());
        assert!(inv_sigmoid(1.0, INV_SIGMOID_EPS).is_finite());
    }

    #[test]
    fn masks_have_expected_layout() {
        let m = AttnMask::block_diagonal(&[2, 0, 1]);
        assert_eq!((m.rows(), m.cols()), (3, 3));
        assert!(m.is_allowed(0, 1) && m.is_allowed(1, 0) && m.is_allowed(2, 2));
        assert!(!m.is_allowed(0, 2) && !m.is_allowed(2, 1));
        let g = AttnMask::group_rows(&[2, 0, 1]);
        assert_eq!((g.rows(), g.cols()), (3, 3));
        assert!(g.is_allowed(0, 0) && g.is_allowed(0, 1) && g.is_allowed(2, 2));
        assert!(!g.row_has_allowed(1));
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(
            vals in proptest::collection::vec(-50.0f64..50.0, 12),
            bits in proptest::collection::vec(any::<bool>(), 12),
        ) {
            let s = Matrix::from_vec(3, 4, vals).unwrap();
            let mut mask = AttnMask::none(3, 4);
            for r in 0..3 {
                for c in 0..4 {
                    mask.set(r, c, bits[r * 4 + c] || c == r);
                }
            }
            let p = masked_softmax(&s, &mask).unwrap();
            for r in 0..3 {
                let sum: f64 = p.row(r).iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-9);
                for c in 0..4 {
                    if !mask.is_allowed(r, c) {
                        prop_assert_eq!(p.get(r, c), 0.0);
                    }
                }
            }
        }

        #[test]
        fn layer_norm_shift_invariant(
            vals in proptest::collection::vec(-10.0f64..10.0, 8),
            shift in -100.0f64..100.0,
        ) {
            let x = Matrix::from_vec(1, 8, vals.clone()).unwrap();
            let xs = Matrix::from_vec(1, 8, vals.iter().map(|v| v + shift).collect()).unwrap();
            let a = layer_norm(&x, &[1.0; 8], &[0.0; 8], 1e-5).unwrap();
            let b = layer_norm(&xs, &[1.0; 8], &[0.0; 8], 1e-5).unwrap();
            for (u, v) in a.data().iter().zip(b.data()) {
                prop_assert!((u - v).abs() <= 1e-9);
            }
        }

        #[test]
        fn sigmoid_round_trip(x in -10.0f64..10.0) {
            prop_assert!((inv_sigmoid(sigmoid(x), INV_SIGMOID_EPS) - x).abs() <= 1e-6);
        }
    }
}
