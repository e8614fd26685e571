//! Dense row-major matrices, closed-form ridge regression and explained variance.
//!
//! Storage is `f32`; every reduction (normal equations, variances) runs in `f64`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Row-major `rows × cols` matrix of `f32`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return shape_err(format!(
                "buffer of {} values cannot hold a {rows}x{cols} matrix",
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Like [`Matrix::from_vec`] but also rejects NaN and infinities.
    pub fn from_vec_finite(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        let m = Self::from_vec(rows, cols, data)?;
        m.ensure_finite()?;
        Ok(m)
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return shape_err("ragged rows");
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn ensure_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite { index }),
            None => Ok(()),
        }
    }

    /// Copy of rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Matrix {
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

    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        if parts.iter().any(|m| m.cols != cols) {
            return shape_err("vstack: column counts differ");
        }
        let mut data = Vec::with_capacity(parts.iter().map(|m| m.len()).sum());
        for m in parts {
            data.extend_from_slice(&m.data);
        }
        let rows = data.len().checked_div(cols).unwrap_or(0);
        Ok(Matrix { rows, cols, data })
    }

    pub fn hstack(parts: &[&Matrix]) -> Result<Matrix> {
        let rows = parts.first().map_or(0, |m| m.rows);
        if parts.iter().any(|m| m.rows != rows) {
            return shape_err("hstack: row counts differ");
        }
        let cols: usize = parts.iter().map(|m| m.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for m in parts {
                data.extend_from_slice(m.row(r));
            }
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Overwrite rows starting at `start` with the rows of `src`.
    pub fn write_rows(&mut self, start: usize, src: &Matrix) {
        debug_assert_eq!(self.cols, src.cols);
        self.data[start * self.cols..(start + src.rows) * self.cols].copy_from_slice(&src.data);
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn sub_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a -= *b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f32) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    fn check_same_shape(&self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return shape_err(format!("{:?} vs {:?}", self.shape(), other.shape()));
        }
        Ok(())
    }
}

/// Affine map `x ↦ x·W + b` with `W` of shape `in_dim × out_dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearMap {
    pub weight: Matrix,
    pub bias: Vec<f32>,
}

impl LinearMap {
    pub fn new(weight: Matrix, bias: Vec<f32>) -> Result<Self> {
        if bias.len() != weight.cols() {
            return shape_err(format!(
                "bias length {} does not match output dim {}",
                bias.len(),
                weight.cols()
            ));
        }
        Ok(Self { weight, bias })
    }

    pub fn zero(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(in_dim, out_dim),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        self.apply_parts(&[x])
    }

    /// Applies the map to the horizontal concatenation of `parts` without
    /// materializing it. Each output row depends only on its input row and is
    /// accumulated in a fixed order, so results do not depend on how rows are
    /// batched.
    pub fn apply_parts(&self, parts: &[&Matrix]) -> Result<Matrix> {
        let rows = parts.first().map_or(0, |m| m.rows());
        let in_dim: usize = parts.iter().map(|m| m.cols()).sum();
        if parts.iter().any(|m| m.rows() != rows) {
            return shape_err("predictor input parts have different row counts");
        }
        if in_dim != self.in_dim() {
            return shape_err(format!(
                "predictor expects {} input channels, got {in_dim}",
                self.in_dim()
            ));
        }
        let out_dim = self.out_dim();
        let mut out = Matrix::zeros(rows, out_dim);
        out.data
            .par_chunks_mut(out_dim.max(1))
            .enumerate()
            .for_each(|(r, dst)| {
                dst.copy_from_slice(&self.bias);
                let mut k = 0;
                for part in parts {
                    for &xk in part.row(r) {
                        let w = self.weight.row(k);
                        for (d, &wk) in dst.iter_mut().zip(w) {
                            *d += xk * wk;
                        }
                        k += 1;
                    }
                }
            });
        Ok(out)
    }
}

/// Rows per block when accumulating normal equations.
const GRAM_BLOCK_ROWS: usize = 1024;
/// Blocks summed sequentially inside one shard before shards are reduced in order.
const GRAM_SHARD_BLOCKS: usize = 8;

/// Closed-form ridge regression: minimizes `||XW + b − Y||² + λ||W||²`.
///
/// Solved through the augmented normal equations with a Cholesky
/// factorization; the bias is not penalized.
pub fn ridge_fit(x: &Matrix, y: &Matrix, lambda: f64) -> Result<LinearMap> {
    ridge_fit_parts(&[x], y, lambda, None)
}

/// Ridge fit over the concatenation of `x_parts`, restricted to `rows` when given.
pub fn ridge_fit_parts(
    x_parts: &[&Matrix],
    y: &Matrix,
    lambda: f64,
    rows: Option<&[usize]>,
) -> Result<LinearMap> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Config(format!(
            "lambda must be a finite value >= 0, got {lambda}"
        )));
    }
    let n_total = y.rows();
    if x_parts.iter().any(|m| m.rows() != n_total) {
        return shape_err("X and Y have different row counts");
    }
    let n = rows.map_or(n_total, <[usize]>::len);
    if n == 0 {
        return shape_err("ridge_fit needs at least one row");
    }
    let p: usize = x_parts.iter().map(|m| m.cols()).sum();
    let q = y.cols();
    let pa = p + 1;

    let (mut gram, xty) = normal_equations(x_parts, y, rows, n);
    for i in 0..p {
        gram[i * pa + i] += lambda;
    }
    cholesky(&mut gram, pa, lambda == 0.0)?;
    let sol = cholesky_solve(&gram, pa, &xty, q);

    let mut weight = Matrix::zeros(p, q);
    for i in 0..p {
        for j in 0..q {
            weight.set(i, j, sol[i * q + j] as f32);
        }
    }
    let bias = (0..q).map(|j| sol[p * q + j] as f32).collect();
    LinearMap::new(weight, bias)
}

/// Accumulates `[X 1]ᵀ[X 1]` and `[X 1]ᵀY` in f64 with a fixed blocking so
/// the result is independent of the thread count.
fn normal_equations(
    x_parts: &[&Matrix],
    y: &Matrix,
    rows: Option<&[usize]>,
    n: usize,
) -> (Vec<f64>, Vec<f64>) {
    let p: usize = x_parts.iter().map(|m| m.cols()).sum();
    let pa = p + 1;
    let q = y.cols();
    let row_at = |i: usize| rows.map_or(i, |r| r[i]);

    let n_blocks = n.div_ceil(GRAM_BLOCK_ROWS);
    let n_shards = n_blocks.div_ceil(GRAM_SHARD_BLOCKS);
    let shard_sums: Vec<(Vec<f64>, Vec<f64>)> = (0..n_shards)
        .into_par_iter()
        .map(|shard| {
            let mut g = vec![0.0f64; pa * pa];
            let mut xy = vec![0.0f64; pa * q];
            let mut a = vec![0.0f64; GRAM_BLOCK_ROWS * pa];
            let mut b = vec![0.0f64; GRAM_BLOCK_ROWS * q];
            let first = shard * GRAM_SHARD_BLOCKS;
            let last = ((shard + 1) * GRAM_SHARD_BLOCKS).min(n_blocks);
            for blk in first..last {
                let start = blk * GRAM_BLOCK_ROWS;
                let end = (start + GRAM_BLOCK_ROWS).min(n);
                let m = end - start;
                for (local, i) in (start..end).enumerate() {
                    let src = row_at(i);
                    let dst = &mut a[local * pa..(local + 1) * pa];
                    let mut k = 0;
                    for part in x_parts {
                        for &v in part.row(src) {
                            dst[k] = v as f64;
                            k += 1;
                        }
                    }
                    dst[p] = 1.0;
                    for (d, &v) in b[local * q..(local + 1) * q].iter_mut().zip(y.row(src)) {
                        *d = v as f64;
                    }
                }
                // SAFETY: all pointers address live buffers sized for the
                // declared (m, k, n) shapes and strides.
                unsafe {
                    matrixmultiply::dgemm(
                        pa,
                        m,
                        pa,
                        1.0,
                        a.as_ptr(),
                        1,
                        pa as isize,
                        a.as_ptr(),
                        pa as isize,
                        1,
                        1.0,
                        g.as_mut_ptr(),
                        pa as isize,
                        1,
                    );
                    matrixmultiply::dgemm(
                        pa,
                        m,
                        q,
                        1.0,
                        a.as_ptr(),
                        1,
                        pa as isize,
                        b.as_ptr(),
                        q as isize,
                        1,
                        1.0,
                        xy.as_mut_ptr(),
                        q as isize,
                        1,
                    );
                }
            }
            (g, xy)
        })
        .collect();

    let mut gram = vec![0.0f64; pa * pa];
    let mut xty = vec![0.0f64; pa * q];
    for (g, xy) in shard_sums {
        gram.iter_mut().zip(&g).for_each(|(d, s)| *d += s);
        xty.iter_mut().zip(&xy).for_each(|(d, s)| *d += s);
    }
    (gram, xty)
}

/// In-place lower Cholesky factorization of a symmetric `n × n` matrix.
fn cholesky(a: &mut [f64], n: usize, strict: bool) -> Result<()> {
    let max_diag = (0..n).map(|i| a[i * n + i].abs()).fold(0.0f64, f64::max);
    let tol = if strict {
        1e-12 * max_diag.max(f64::MIN_POSITIVE)
    } else {
        0.0
    };
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > tol) {
            return Err(Error::Singular { pivot: j });
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    Ok(())
}

/// Solves `L Lᵀ X = B` for `B` of shape `n × m`, given the lower factor in `l`.
fn cholesky_solve(l: &[f64], n: usize, b: &[f64], m: usize) -> Vec<f64> {
    let mut x = b.to_vec();
    for c in 0..m {
        for i in 0..n {
            let mut s = x[i * m + c];
            for k in 0..i {
                s -= l[i * n + k] * x[k * m + c];
            }
            x[i * m + c] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = x[i * m + c];
            for k in i + 1..n {
                s -= l[k * n + i] * x[k * m + c];
            }
            x[i * m + c] = s / l[i * n + i];
        }
    }
    x
}

/// How per-channel explained variances are combined into one number.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvrAggregation {
    /// `1 − Σ_c Var(residual_c) / Σ_c Var(target_c)`.
    #[default]
    Pooled,
    /// Mean over channels of `1 − Var(residual_c) / Var(target_c)`,
    /// skipping channels whose target variance is zero.
    ChannelMean,
}

/// Per-channel population variances of `y` (if `y_hat` is `None`) or of the
/// residual `y − y_hat`.
pub fn channel_variances(y: &Matrix, y_hat: Option<&Matrix>) -> Vec<f64> {
    let (n, c) = y.shape();
    let mut sum = vec![0.0f64; c];
    let mut sum_sq = vec![0.0f64; c];
    // Two passes: mean first, then centered squares.
    for r in 0..n {
        let yr = y.row(r);
        match y_hat {
            Some(h) => {
                for ((s, &a), &b) in sum.iter_mut().zip(yr).zip(h.row(r)) {
                    *s += a as f64 - b as f64;
                }
            }
            None => {
                for (s, &a) in sum.iter_mut().zip(yr) {
                    *s += a as f64;
                }
            }
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n.max(1) as f64).collect();
    for r in 0..n {
        let yr = y.row(r);
        for j in 0..c {
            let v = match y_hat {
                Some(h) => yr[j] as f64 - h.row(r)[j] as f64,
                None => yr[j] as f64,
            } - mean[j];
            sum_sq[j] += v * v;
        }
    }
    sum_sq.iter().map(|s| s / n.max(1) as f64).collect()
}

/// Explained variance ratio of `y_hat` as a reconstruction of `y`, pooled over channels.
pub fn explained_variance_ratio(y: &Matrix, y_hat: &Matrix) -> Result<f64> {
    explained_variance_ratio_with(y, y_hat, EvrAggregation::Pooled)
}

pub fn explained_variance_ratio_with(
    y: &Matrix,
    y_hat: &Matrix,
    agg: EvrAggregation,
) -> Result<f64> {
    if y.shape() != y_hat.shape() {
        return shape_err(format!("EVR: {:?} vs {:?}", y.shape(), y_hat.shape()));
    }
    if y.rows() < 2 {
        return shape_err("EVR needs at least two rows");
    }
    let target = channel_variances(y, None);
    let resid = channel_variances(y, Some(y_hat));
    evr_from_variances(&target, &resid, agg)
}

/// Combines per-channel target and residual variances into an EVR.
pub fn evr_from_variances(target: &[f64], resid: &[f64], agg: EvrAggregation) -> Result<f64> {
    match agg {
        EvrAggregation::Pooled => {
            let t: f64 = target.iter().sum();
            if t <= 0.0 {
                return Err(Error::DegenerateTarget);
            }
            Ok(1.0 - resid.iter().sum::<f64>() / t)
        }
        EvrAggregation::ChannelMean => {
            let mut acc = 0.0;
            let mut count = 0usize;
            for (&t, &r) in target.iter().zip(resid) {
                if t > 0.0 {
                    acc += 1.0 - r / t;
                    count += 1;
                }
            }
            if count == 0 {
                return Err(Error::DegenerateTarget);
            }
            Ok(acc / count as f64)
        }
    }
}

/// Mean squared difference between two equally shaped matrices.
pub fn mean_squared_error(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return shape_err(format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(s / a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut s = seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        let data = (0..rows * cols)
            .map(|_| {
                s = s
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((s >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
            })
            .collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn identity_fit_recovers_identity() {
        let x = lcg_matrix(64, 5, 3);
        let map = ridge_fit(&x, &x, 0.0).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((map.weight.get(i, j) - want).abs() < 1e-5);
            }
            assert!(map.bias[i].abs() < 1e-5);
        }
    }

    #[test]
    fn hand_solved_line() {
        // Augmented normal equations [[14, 6], [6, 3]] [w, b] = [28, 12] → w = 2, b = 0.
        let x = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let y = Matrix::from_rows(&[vec![2.0], vec![4.0], vec![6.0]]).unwrap();
        let map = ridge_fit(&x, &y, 0.0).unwrap();
        assert!((map.weight.get(0, 0) - 2.0).abs() < 1e-6);
        assert!(map.bias[0].abs() < 1e-6);
    }

    #[test]
    fn singular_without_regularization() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]]).unwrap();
        let y = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let err = ridge_fit(&x, &y, 0.0).unwrap_err();
        assert!(matches!(err, Error::Singular { .. }));
        assert!(err.to_string().contains("lambda > 0"));
        assert!(ridge_fit(&x, &y, 1e-3).is_ok());
    }

    #[test]
    fn constant_inputs_give_bias_only_map() {
        let x = Matrix::from_vec(10, 3, vec![0.5; 30]).unwrap();
        let y = Matrix::from_vec(10, 2, vec![-1.5; 20]).unwrap();
        let map = ridge_fit(&x, &y, 1e-3).unwrap();
        let pred = map.apply(&x).unwrap();
        for v in pred.as_slice() {
            assert!((v + 1.5).abs() < 1e-3);
        }
    }

    #[test]
    fn rejects_negative_lambda_and_bad_rows() {
        let x = lcg_matrix(4, 2, 1);
        let y = lcg_matrix(5, 1, 1);
        assert!(ridge_fit(&x, &x, -1.0).is_err());
        assert!(matches!(ridge_fit(&x, &y, 0.1), Err(Error::Shape(_))));
    }

    #[test]
    fn residual_non_decreasing_in_lambda() {
        let x = lcg_matrix(40, 6, 11);
        let y = lcg_matrix(40, 3, 12);
        let mut last = 0.0;
        for lambda in [0.0, 1e-3, 1e-1, 1.0, 10.0, 100.0] {
            let pred = ridge_fit(&x, &y, lambda).unwrap().apply(&x).unwrap();
            let r = mean_squared_error(&pred, &y).unwrap();
            assert!(r >= last - 1e-9, "lambda {lambda}: {r} < {last}");
            last = r;
        }
    }

    #[test]
    fn row_subset_matches_gathered_fit() {
        let x = lcg_matrix(50, 4, 21);
        let y = lcg_matrix(50, 2, 22);
        let idx: Vec<usize> = (0..50).filter(|i| i % 3 != 0).collect();
        let a = ridge_fit_parts(&[&x], &y, 1e-3, Some(&idx)).unwrap();
        let b = ridge_fit(&x.gather_rows(&idx), &y.gather_rows(&idx), 1e-3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_inputs_match_concatenation() {
        let a = lcg_matrix(30, 3, 5);
        let b = lcg_matrix(30, 2, 6);
        let y = lcg_matrix(30, 2, 7);
        let cat = Matrix::hstack(&[&a, &b]).unwrap();
        let m1 = ridge_fit_parts(&[&a, &b], &y, 1e-3, None).unwrap();
        let m2 = ridge_fit(&cat, &y, 1e-3).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(m1.apply_parts(&[&a, &b]).unwrap(), m1.apply(&cat).unwrap());
    }

    #[test]
    fn evr_anchor_values() {
        let y = lcg_matrix(100, 4, 9);
        assert!((explained_variance_ratio(&y, &y).unwrap() - 1.0).abs() < 1e-12);

        let mut mean_pred = Matrix::zeros(100, 4);
        for c in 0..4 {
            let m: f64 = (0..100).map(|r| y.get(r, c) as f64).sum::<f64>() / 100.0;
            for r in 0..100 {
                mean_pred.set(r, c, m as f32);
            }
        }
        assert!(explained_variance_ratio(&y, &mean_pred).unwrap().abs() < 1e-6);

        // Y = 2Z, Ŷ = Z so the residual is Z: 1 − 1/4.
        let z = lcg_matrix(200, 3, 10);
        let mut y2 = z.clone();
        y2.scale(2.0);
        let evr = explained_variance_ratio(&y2, &z).unwrap();
        assert!((evr - 0.75).abs() < 1e-6);
    }

    #[test]
    fn evr_degenerate_and_shape_errors() {
        let y = Matrix::from_vec(5, 2, vec![1.0; 10]).unwrap();
        assert!(matches!(
            explained_variance_ratio(&y, &y),
            Err(Error::DegenerateTarget)
        ));
        assert!(matches!(
            explained_variance_ratio_with(&y, &y, EvrAggregation::ChannelMean),
            Err(Error::DegenerateTarget)
        ));
        let one = Matrix::zeros(1, 2);
        assert!(explained_variance_ratio(&one, &one).is_err());
    }

    #[test]
    fn channel_mean_differs_from_pooled_on_unequal_scales() {
        let mut y = lcg_matrix(100, 2, 30);
        for r in 0..100 {
            let v = y.get(r, 1) * 10.0;
            y.set(r, 1, v);
        }
        let mut y_hat = y.clone();
        for r in 0..100 {
            y_hat.set(r, 0, 0.0);
        }
        let pooled = explained_variance_ratio(&y, &y_hat).unwrap();
        let mean = explained_variance_ratio_with(&y, &y_hat, EvrAggregation::ChannelMean).unwrap();
        assert!(pooled > 0.95);
        assert!((mean - 0.5).abs() < 0.05);
    }
}
