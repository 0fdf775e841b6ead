//! Dense matrix kernels: a small row-major matrix type, rank-r SVD,
//! orthogonal Procrustes alignment, the factor distance built on it, and
//! linear-time sample quantiles.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Row-major dense matrix of `f64`.
///
/// Construction through [`DenseMatrix::new`] rejects non-finite entries.
/// Arithmetic on valid matrices can still overflow; callers that need the
/// guarantee afterwards check [`DenseMatrix::is_finite`].
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for DenseMatrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        DenseMatrix::new(raw.rows, raw.cols, raw.data)
    }
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for row in self.data.chunks(self.cols.max(1)) {
            writeln!(f, "  {row:?}")?;
        }
        write!(f, "]")
    }
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(invalid(format!("matrix dimensions must be positive, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(invalid(format!("{rows}x{cols} matrix needs {} entries, got {}", rows * cols, data.len())));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite entry at ({}, {})", pos / cols, pos % cols)));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Square matrix with `diag` on the diagonal.
    pub fn from_diagonal(diag: &[f64]) -> Self {
        Self::from_fn(diag.len(), diag.len(), |i, j| if i == j { diag[i] } else { 0.0 })
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, rhs: &Self) -> Self {
        assert_eq!(self.cols, rhs.rows, "matmul shape mismatch");
        let mut out = vec![0.0; self.rows * rhs.cols];
        for i in 0..self.rows {
            let out_row = &mut out[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Self::from_vec_unchecked(self.rows, rhs.cols, out)
    }

    /// `selfᵀ · rhs` without forming the transpose.
    pub fn t_matmul(&self, rhs: &Self) -> Self {
        assert_eq!(self.rows, rhs.rows, "t_matmul shape mismatch");
        let mut out = vec![0.0; self.cols * rhs.cols];
        for k in 0..self.rows {
            let b_row = rhs.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                let out_row = &mut out[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Self::from_vec_unchecked(self.cols, rhs.cols, out)
    }

    /// `self · rhsᵀ` without forming the transpose.
    pub fn matmul_t(&self, rhs: &Self) -> Self {
        assert_eq!(self.cols, rhs.cols, "matmul_t shape mismatch");
        let mut out = Vec::with_capacity(self.rows * rhs.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..rhs.rows {
                out.push(dot(a, rhs.row(j)));
            }
        }
        Self::from_vec_unchecked(self.rows, rhs.rows, out)
    }

    pub fn add(&self, rhs: &Self) -> Self {
        self.zip_with(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Self) -> Self {
        self.zip_with(rhs, |a, b| a - b)
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self::from_vec_unchecked(self.rows, self.cols, self.data.iter().map(|v| v * factor).collect())
    }

    /// `self += factor * rhs`.
    pub fn axpy(&mut self, factor: f64, rhs: &Self) {
        assert_eq!(self.shape(), rhs.shape(), "axpy shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += factor * b;
        }
    }

    fn zip_with(&self, rhs: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape(), rhs.shape(), "elementwise shape mismatch");
        let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect();
        Self::from_vec_unchecked(self.rows, self.cols, data)
    }

    /// Frobenius inner product `⟨self, rhs⟩`.
    pub fn inner(&self, rhs: &Self) -> f64 {
        assert_eq!(self.shape(), rhs.shape(), "inner product shape mismatch");
        dot(&self.data, &rhs.data)
    }

    pub fn frobenius_norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    /// Largest singular value.
    pub fn spectral_norm(&self) -> Result<f64> {
        Ok(singular_values(self)?.first().copied().unwrap_or(0.0))
    }

    /// Stack `self` on top of `lower`.
    pub fn vstack(&self, lower: &Self) -> Result<Self> {
        if self.cols != lower.cols {
            return Err(invalid(format!(
                "cannot stack {}x{} over {}x{}",
                self.rows, self.cols, lower.rows, lower.cols
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&lower.data);
        Ok(Self::from_vec_unchecked(self.rows + lower.rows, self.cols, data))
    }

    /// Split into the first `top` rows and the rest.
    pub fn split_rows(&self, top: usize) -> (Self, Self) {
        assert!(top > 0 && top < self.rows, "split point out of range");
        let (a, b) = self.data.split_at(top * self.cols);
        (
            Self::from_vec_unchecked(top, self.cols, a.to_vec()),
            Self::from_vec_unchecked(self.rows - top, self.cols, b.to_vec()),
        )
    }

    fn to_faer(&self) -> faer::Mat<f64> {
        faer::Mat::from_fn(self.rows, self.cols, |i, j| self.get(i, j))
    }

    fn from_faer(m: faer::MatRef<'_, f64>) -> Self {
        Self::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // four accumulators so the loop vectorizes
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in ca.by_ref().zip(cb.by_ref()) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Top-r singular triplets of a matrix.
#[derive(Debug, Clone)]
pub struct RankRSvd {
    /// `rows × r`, orthonormal columns.
    pub left: DenseMatrix,
    /// Nonincreasing, nonnegative.
    pub singulars: Vec<f64>,
    /// `cols × r`, orthonormal columns.
    pub right: DenseMatrix,
}

impl RankRSvd {
    pub fn rank(&self) -> usize {
        self.singulars.len()
    }

    /// `left · diag(singulars) · rightᵀ`.
    pub fn reconstruct(&self) -> DenseMatrix {
        let scaled =
            DenseMatrix::from_fn(self.left.rows(), self.rank(), |i, j| self.left.get(i, j) * self.singulars[j]);
        scaled.matmul_t(&self.right)
    }
}

// nalgebra's bidiagonal QR loses accuracy on exactly rank-deficient input
// (3x7 rank 2 reconstructed with 1e-2 error); faer's divide and conquer does not
fn thin_svd(m: &DenseMatrix) -> Result<faer::linalg::solvers::Svd<f64>> {
    m.to_faer().thin_svd().map_err(|_| Error::NumericalFailure { what: "SVD" })
}

/// All singular values, nonincreasing.
pub fn singular_values(m: &DenseMatrix) -> Result<Vec<f64>> {
    let mut s: Vec<f64> = m.to_faer().singular_values().map_err(|_| Error::NumericalFailure { what: "SVD" })?;
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

/// Best rank-`r` approximation of `m` in Frobenius norm, as singular triplets.
///
/// Computes a full thin SVD and keeps the `r` largest triplets. Signs and
/// the order of equal singular values are unspecified.
pub fn rank_r_svd(m: &DenseMatrix, r: usize) -> Result<RankRSvd> {
    let k = m.rows().min(m.cols());
    if r == 0 || r > k {
        return Err(invalid(format!("rank {r} out of range 1..={k} for a {}x{} matrix", m.rows(), m.cols())));
    }
    let svd = thin_svd(m)?;
    let (u, v) = (svd.U(), svd.V());
    let sigma: Vec<f64> = svd.S().column_vector().iter().copied().collect();

    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]));
    order.truncate(r);

    let left = DenseMatrix::from_fn(m.rows(), r, |i, j| u[(i, order[j])]);
    let right = DenseMatrix::from_fn(m.cols(), r, |i, j| v[(i, order[j])]);
    let singulars = order.iter().map(|&j| sigma[j].max(0.0)).collect();
    Ok(RankRSvd { left, singulars, right })
}

fn check_same_shape(w: &DenseMatrix, z: &DenseMatrix) -> Result<()> {
    if w.shape() != z.shape() {
        return Err(invalid(format!("shape mismatch: {}x{} vs {}x{}", w.rows(), w.cols(), z.rows(), z.cols())));
    }
    Ok(())
}

/// Orthogonal `r × r` matrix `Q` minimizing `‖W − ZQ‖_F`.
///
/// With `ZᵀW = A Σ Bᵀ`, the minimizer is `Q = A Bᵀ`.
pub fn procrustes_align(w: &DenseMatrix, z: &DenseMatrix) -> Result<DenseMatrix> {
    check_same_shape(w, z)?;
    let cross = z.t_matmul(w);
    let svd = thin_svd(&cross)?;
    let a = DenseMatrix::from_faer(svd.U());
    let b = DenseMatrix::from_faer(svd.V());
    Ok(a.matmul_t(&b))
}

/// `dist(W, Z) = min_P ‖W − ZP‖_F` over orthogonal `P`.
pub fn factor_distance(w: &DenseMatrix, z: &DenseMatrix) -> Result<f64> {
    let q = procrustes_align(w, z)?;
    Ok(w.sub(&z.matmul(&q)).frobenius_norm())
}

/// A quantile level strictly inside `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Quantile(f64);

impl Quantile {
    pub const MEDIAN: Quantile = Quantile(0.5);

    pub fn new(tau: f64) -> Result<Self> {
        if tau > 0.0 && tau < 1.0 {
            Ok(Self(tau))
        } else {
            Err(invalid(format!("quantile level must lie in (0, 1), got {tau}")))
        }
    }

    pub fn tau(self) -> f64 {
        self.0
    }

    /// 1-based order-statistic index `⌈τm⌉` selected from `m` samples.
    ///
    /// `τm` within a few ulps of an integer is treated as that integer, so
    /// levels such as `0.5 - 0.05` do not round up past the intended rank.
    pub fn rank(self, m: usize) -> usize {
        let x = self.0 * m as f64;
        let nearest = x.round();
        let k = if (x - nearest).abs() <= 1e-9 * x.max(1.0) { nearest } else { x.ceil() };
        (k as usize).clamp(1, m.max(1))
    }
}

impl TryFrom<f64> for Quantile {
    type Error = Error;

    fn try_from(tau: f64) -> Result<Self> {
        Quantile::new(tau)
    }
}

impl From<Quantile> for f64 {
    fn from(q: Quantile) -> f64 {
        q.0
    }
}

/// Sample quantile `θ_τ`: the `⌈τm⌉`-th smallest element.
///
/// Expected linear time. The result is always one of the inputs, so the
/// median of an even-length sample is the lower middle element.
pub fn sample_quantile(values: &[f64], q: Quantile) -> Result<f64> {
    if values.is_empty() {
        return Err(invalid("sample quantile of an empty sequence"));
    }
    let mut scratch = values.to_vec();
    Ok(select_quantile_in_place(&mut scratch, q))
}

/// Sample median `θ_{1/2}`.
pub fn sample_median(values: &[f64]) -> Result<f64> {
    sample_quantile(values, Quantile::MEDIAN)
}

/// Same as [`sample_quantile`] but permutes `values` instead of copying.
/// Panics on empty input.
pub fn select_quantile_in_place(values: &mut [f64], q: Quantile) -> f64 {
    let k = q.rank(values.len());
    let (_, kth, _) = values.select_nth_unstable_by(k - 1, total_order);
    *kth
}

fn total_order(a: &f64, b: &f64) -> Ordering {
    a.total_cmp(b)
}
