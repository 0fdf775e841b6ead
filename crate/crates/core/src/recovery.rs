//! Median-truncated gradient descent and the untruncated baseline.
//!
//! The iterate is a factor pair `(U, V)` with `M̂ = UVᵀ`. Each iteration
//! computes residuals `r_i = y_i − ⟨A_i, UVᵀ⟩`, keeps the samples with
//! `|r_i| ≤ α_h · med(|r|)`, and takes a gradient step on
//!
//! ```text
//! h(U, V) = (1/4m) Σ_{i kept} r_i² + (λ/4) ‖UᵀU − VᵀV‖_F²
//! ```
//!
//! with step sizes `μ/‖U₀‖²` and `μ/‖V₀‖²` frozen at initialization.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{invalid, io_error, Error, Result};
use crate::linalg::{factor_distance, rank_r_svd, select_quantile_in_place, DenseMatrix, Quantile, RankRSvd};
use crate::sensing::ProblemInstance;

pub const DEFAULT_ALPHA_Y: f64 = 12.0;
pub const DEFAULT_ALPHA_H: f64 = 6.0;
pub const DEFAULT_STEP_MU: f64 = 0.4;
pub const DEFAULT_MAX_ITERS: usize = 10_000;

/// `γ₁(0.65 · 6) / 4`, the balance weight used when none is given.
pub fn default_lambda() -> f64 {
    gamma1(0.65 * DEFAULT_ALPHA_H) / 4.0
}

/// Estimate `(U, V)` of the low-rank factors. Serializes as the `{u, v}`
/// factor block of the JSON schemas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorPair {
    pub u: DenseMatrix,
    pub v: DenseMatrix,
}

impl FactorPair {
    pub fn new(u: DenseMatrix, v: DenseMatrix) -> Result<Self> {
        if u.cols() != v.cols() {
            return Err(invalid(format!("factor ranks differ: {} vs {}", u.cols(), v.cols())));
        }
        Ok(Self { u, v })
    }

    /// `(C_L Σ^{1/2}, C_R Σ^{1/2})`.
    pub fn from_svd(svd: &RankRSvd) -> Self {
        let roots: Vec<f64> = svd.singulars.iter().map(|s| s.sqrt()).collect();
        let scale = |m: &DenseMatrix| DenseMatrix::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j) * roots[j]);
        Self { u: scale(&svd.left), v: scale(&svd.right) }
    }

    pub fn rank(&self) -> usize {
        self.u.cols()
    }

    /// `W = [U; V]`.
    pub fn stacked(&self) -> DenseMatrix {
        self.u.vstack(&self.v).expect("factor pair has matching ranks")
    }

    /// `UVᵀ`.
    pub fn product(&self) -> DenseMatrix {
        self.u.matmul_t(&self.v)
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    /// Median-truncated gradient descent.
    MedianTgd,
    /// All samples every iteration, untruncated spectral initialization.
    VanillaGd,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::MedianTgd => "median-tgd",
            Algorithm::VanillaGd => "vanilla-gd",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryConfig {
    pub rank: usize,
    /// Initialization threshold multiplier; `+∞` disables truncation.
    pub alpha_y: f64,
    /// Gradient truncation multiplier, must exceed 1.
    pub alpha_h: f64,
    pub step_mu: f64,
    pub lambda: f64,
    pub max_iters: usize,
    /// Use the sample-split initialization.
    pub split_init: bool,
    /// Stop once `‖W_{t+1} − W_t‖_F / ‖W_t‖_F < stop_tol`; zero disables.
    pub stop_tol: f64,
    pub algorithm: Algorithm,
}

impl RecoveryConfig {
    pub fn new(rank: usize) -> Self {
        Self {
            rank,
            alpha_y: DEFAULT_ALPHA_Y,
            alpha_h: DEFAULT_ALPHA_H,
            step_mu: DEFAULT_STEP_MU,
            lambda: default_lambda(),
            max_iters: DEFAULT_MAX_ITERS,
            split_init: false,
            stop_tol: 0.0,
            algorithm: Algorithm::MedianTgd,
        }
    }

    pub fn with_algorithm(mut self, algorithm: Algorithm) -> Self {
        self.algorithm = algorithm;
        self
    }

    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }

    pub fn with_stop_tol(mut self, stop_tol: f64) -> Self {
        self.stop_tol = stop_tol;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.rank == 0 {
            problems.push("rank must be at least 1".to_string());
        }
        if self.alpha_y.is_nan() || self.alpha_y <= 0.0 {
            problems.push(format!("alpha_y must be positive, got {}", self.alpha_y));
        }
        if !(self.alpha_h > 1.0 && self.alpha_h.is_finite()) {
            problems.push(format!("alpha_h must be finite and > 1, got {}", self.alpha_h));
        }
        if !(self.step_mu > 0.0 && self.step_mu.is_finite()) {
            problems.push(format!("step_mu must be finite and > 0, got {}", self.step_mu));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            problems.push(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if self.stop_tol.is_nan() || self.stop_tol < 0.0 {
            problems.push(format!("stop_tol must be >= 0, got {}", self.stop_tol));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(invalid(problems.join("; ")))
        }
    }
}

fn check_rank(instance: &ProblemInstance, rank: usize) -> Result<()> {
    let max = instance.n1().min(instance.n2());
    if rank == 0 || rank > max {
        return Err(invalid(format!("rank {rank} out of range 1..={max}")));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SpectralInit {
    pub factors: FactorPair,
    /// Set when every sample was truncated (or all kept samples were zero),
    /// leaving `K = 0`.
    pub degenerate: bool,
    /// Number of samples that entered `K`.
    pub kept: usize,
}

/// Truncated spectral initialization.
///
/// Without splitting, `K = (1/m) Σ_i y_i A_i 1{|y_i| ≤ α_y med(|y|)}`. With
/// `split_init`, the first `m₁ = ⌈m/2⌉` samples build `K` (scaled by
/// `1/m₁`) and the median is taken over the remaining ones. The factors
/// come from the rank-r SVD `K ≈ C_L Σ C_Rᵀ` as `C_L Σ^{1/2}`, `C_R Σ^{1/2}`.
pub fn truncated_spectral_init(instance: &ProblemInstance, config: &RecoveryConfig) -> Result<SpectralInit> {
    check_rank(instance, config.rank)?;
    let y = &instance.measurements;
    let m = y.len();
    let (used, reference) = if config.split_init {
        if m < 2 {
            return Err(invalid("split initialization needs at least two measurements"));
        }
        let m1 = m.div_ceil(2);
        (m1, &y[m1..])
    } else {
        (m, &y[..])
    };

    let threshold = if config.alpha_y.is_infinite() {
        f64::INFINITY
    } else {
        let mut abs: Vec<f64> = reference.iter().map(|v| v.abs()).collect();
        config.alpha_y * select_quantile_in_place(&mut abs, Quantile::MEDIAN)
    };

    let mut coeffs = vec![0.0; m];
    let mut kept = 0;
    for (c, &yi) in coeffs.iter_mut().zip(&y[..used]) {
        if yi.abs() <= threshold {
            *c = yi / used as f64;
            kept += 1;
        }
    }

    let (n1, n2, r) = (instance.n1(), instance.n2(), config.rank);
    let mut k = vec![0.0; n1 * n2];
    instance.ensemble.adjoint_into(&coeffs, &mut k);
    if k.iter().all(|&v| v == 0.0) {
        return Ok(SpectralInit {
            factors: FactorPair { u: DenseMatrix::zeros(n1, r), v: DenseMatrix::zeros(n2, r) },
            degenerate: true,
            kept,
        });
    }
    let k = DenseMatrix::from_vec_unchecked(n1, n2, k);
    let svd = rank_r_svd(&k, r)?;
    Ok(SpectralInit { factors: FactorPair::from_svd(&svd), degenerate: false, kept })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruncationMask {
    pub mask: Vec<bool>,
    /// `med(|r|)`.
    pub median: f64,
    pub kept: usize,
}

/// `mask_i = |r_i| ≤ α_h · med(|r|)`, inclusive.
pub fn truncation_mask(residuals: &[f64], alpha_h: f64) -> Result<TruncationMask> {
    if residuals.is_empty() {
        return Err(invalid("truncation mask of an empty residual vector"));
    }
    let mut abs: Vec<f64> = residuals.iter().map(|r| r.abs()).collect();
    let median = select_quantile_in_place(&mut abs, Quantile::MEDIAN);
    let threshold = alpha_h * median;
    let mask: Vec<bool> = residuals.iter().map(|r| r.abs() <= threshold).collect();
    let kept = mask.iter().filter(|&&k| k).count();
    Ok(TruncationMask { mask, median, kept })
}

fn check_factors(instance: &ProblemInstance, w: &FactorPair) -> Result<()> {
    let r = w.rank();
    if w.u.shape() != (instance.n1(), r) || w.v.shape() != (instance.n2(), r) {
        return Err(invalid(format!(
            "factors {}x{} / {}x{} do not fit a {}x{} problem",
            w.u.rows(),
            w.u.cols(),
            w.v.rows(),
            w.v.cols(),
            instance.n1(),
            instance.n2()
        )));
    }
    Ok(())
}

/// Predictions `⟨A_i, UVᵀ⟩`.
fn predict(instance: &ProblemInstance, w: &FactorPair, out: &mut [f64]) {
    instance.ensemble.forward_into(w.product().as_slice(), out);
}

/// Gradients given per-sample coefficients `c_i = ⟨A_i, UVᵀ⟩ − y_i`
/// (zero for dropped samples).
fn gradients_from_coeffs(
    instance: &ProblemInstance,
    w: &FactorPair,
    coeffs: &[f64],
    lambda: f64,
    scratch: &mut Vec<f64>,
) -> (DenseMatrix, DenseMatrix) {
    let (n1, n2) = (instance.n1(), instance.n2());
    scratch.resize(n1 * n2, 0.0);
    instance.ensemble.adjoint_into(coeffs, scratch);
    let g = DenseMatrix::from_vec_unchecked(n1, n2, std::mem::take(scratch));
    let inv = 1.0 / (2.0 * instance.m() as f64);

    let mut grad_u = g.matmul(&w.v).scale(inv);
    let mut grad_v = g.t_matmul(&w.u).scale(inv);
    *scratch = g.into_vec();

    if lambda != 0.0 {
        let imbalance = w.u.t_matmul(&w.u).sub(&w.v.t_matmul(&w.v));
        grad_u.axpy(lambda, &w.u.matmul(&imbalance));
        grad_v.axpy(-lambda, &w.v.matmul(&imbalance));
    }
    (grad_u, grad_v)
}

/// Gradients of the truncated objective for a fixed mask:
///
/// ```text
/// ∇_U = (1/2m) Σ_{mask} (⟨A_i,UVᵀ⟩ − y_i) A_i V + λ U (UᵀU − VᵀV)
/// ∇_V = (1/2m) Σ_{mask} (⟨A_i,UVᵀ⟩ − y_i) A_iᵀ U + λ V (VᵀV − UᵀU)
/// ```
pub fn tgd_gradients(
    instance: &ProblemInstance,
    w: &FactorPair,
    mask: &[bool],
    lambda: f64,
) -> Result<(DenseMatrix, DenseMatrix)> {
    check_factors(instance, w)?;
    if mask.len() != instance.m() {
        return Err(invalid(format!("mask length {} != m = {}", mask.len(), instance.m())));
    }
    let mut coeffs = vec![0.0; instance.m()];
    predict(instance, w, &mut coeffs);
    for ((c, &y), &keep) in coeffs.iter_mut().zip(&instance.measurements).zip(mask) {
        *c = if keep { *c - y } else { 0.0 };
    }
    Ok(gradients_from_coeffs(instance, w, &coeffs, lambda, &mut Vec::new()))
}

/// `(1/4m) Σ_{mask} (y_i − ⟨A_i, UVᵀ⟩)² + (λ/4)‖UᵀU − VᵀV‖_F²`.
pub fn masked_objective(instance: &ProblemInstance, w: &FactorPair, mask: &[bool], lambda: f64) -> Result<f64> {
    check_factors(instance, w)?;
    if mask.len() != instance.m() {
        return Err(invalid(format!("mask length {} != m = {}", mask.len(), instance.m())));
    }
    let mut pred = vec![0.0; instance.m()];
    predict(instance, w, &mut pred);
    let loss: f64 = pred
        .iter()
        .zip(&instance.measurements)
        .zip(mask)
        .filter(|(_, &keep)| keep)
        .map(|((p, y), _)| (y - p).powi(2))
        .sum::<f64>()
        / (4.0 * instance.m() as f64);
    let imbalance = w.u.t_matmul(&w.u).sub(&w.v.t_matmul(&w.v)).frobenius_norm();
    Ok(loss + lambda / 4.0 * imbalance * imbalance)
}

/// One row of a recovery trace, describing the iterate `W_t`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterRecord {
    pub iter: usize,
    /// `‖UVᵀ − M‖_F / ‖M‖_F`, when the truth is known.
    pub normalized_error: Option<f64>,
    /// `dist(W_t, Z)` against the balanced truth.
    pub dist: Option<f64>,
    /// `|E^t|`, samples kept for the step out of `W_t`.
    pub truncation_count: usize,
    /// `med(|r^t|)`.
    pub median_residual: f64,
    /// Milliseconds since the start of the gradient loop.
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    MaxIters,
    /// Relative iterate change fell below `stop_tol`.
    Converged,
    /// The next iterate was not finite; the last finite one is kept.
    Diverged,
}

#[derive(Debug, Clone)]
pub struct RecoveryTrace {
    pub records: Vec<IterRecord>,
    pub factors: FactorPair,
    pub stop: StopReason,
    pub algorithm: Algorithm,
}

/// Column header of trace CSV files.
pub const TRACE_CSV_HEADER: &str = "iter,normalized_error,dist,truncation_count,median_residual,wall_ms";

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

impl RecoveryTrace {
    pub fn final_record(&self) -> &IterRecord {
        self.records.last().expect("traces always hold the initial record")
    }

    /// Normalized error of the returned factors; infinite after divergence.
    pub fn final_error(&self) -> Option<f64> {
        match self.stop {
            StopReason::Diverged => self.final_record().normalized_error.map(|_| f64::INFINITY),
            _ => self.final_record().normalized_error,
        }
    }

    /// Normalized error per iteration (empty when the truth is unknown).
    pub fn errors(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.normalized_error).collect()
    }

    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "{TRACE_CSV_HEADER}")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{:e},{:.3}",
                r.iter,
                opt_field(r.normalized_error),
                opt_field(r.dist),
                r.truncation_count,
                r.median_residual,
                r.wall_ms
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(io_error(path))?;
        self.write_csv(std::io::BufWriter::new(file)).map_err(io_error(path))
    }
}

/// Initialize with the configured spectral method, then iterate.
pub fn run_recovery(instance: &ProblemInstance, config: &RecoveryConfig) -> Result<RecoveryTrace> {
    config.validate()?;
    let init_config = match config.algorithm {
        Algorithm::MedianTgd => config.clone(),
        Algorithm::VanillaGd => RecoveryConfig { alpha_y: f64::INFINITY, ..config.clone() },
    };
    let init = truncated_spectral_init(instance, &init_config)?;
    if init.degenerate {
        return Err(Error::InitFailure(format!(
            "spectral initialization produced zero factors ({} of {} samples kept)",
            init.kept,
            instance.m()
        )));
    }
    run_recovery_from(instance, config, init.factors)
}

/// Run the gradient loop from a given starting point.
pub fn run_recovery_from(
    instance: &ProblemInstance,
    config: &RecoveryConfig,
    init: FactorPair,
) -> Result<RecoveryTrace> {
    config.validate()?;
    check_rank(instance, config.rank)?;
    check_factors(instance, &init)?;
    if init.rank() != config.rank {
        return Err(invalid(format!("initial factors have rank {}, config says {}", init.rank(), config.rank)));
    }
    let norm_u0 = init.u.spectral_norm()?;
    let norm_v0 = init.v.spectral_norm()?;
    if norm_u0 == 0.0 || norm_v0 == 0.0 {
        return Err(Error::InitFailure("‖U₀‖ or ‖V₀‖ is zero; step normalization undefined".into()));
    }
    let step_u = config.step_mu / (norm_u0 * norm_u0);
    let step_v = config.step_mu / (norm_v0 * norm_v0);

    let truth = instance.ground_truth()?;
    let z = truth.as_ref().map(|t| t.z());
    let m = instance.m();
    let y = &instance.measurements;

    let mut w = init;
    let mut pred = vec![0.0; m];
    let mut abs = vec![0.0; m];
    let mut coeffs = vec![0.0; m];
    let mut scratch = Vec::new();
    let mut records = Vec::with_capacity(config.max_iters.min(100_000) + 1);
    let mut stop = StopReason::MaxIters;
    let mut converged = false;
    let start = Instant::now();

    for t in 0..=config.max_iters {
        let product = w.product();
        instance.ensemble.forward_into(product.as_slice(), &mut pred);
        for ((a, p), yi) in abs.iter_mut().zip(&pred).zip(y) {
            *a = (yi - p).abs();
        }
        let median = select_quantile_in_place(&mut abs, Quantile::MEDIAN);
        let threshold = match config.algorithm {
            Algorithm::MedianTgd => config.alpha_h * median,
            Algorithm::VanillaGd => f64::INFINITY,
        };
        let mut kept = 0;
        for ((c, p), yi) in coeffs.iter_mut().zip(&pred).zip(y) {
            let r = p - yi;
            *c = if r.abs() <= threshold {
                kept += 1;
                r
            } else {
                0.0
            };
        }

        let normalized_error = truth.as_ref().map(|g| g.normalized_error(&product));
        let dist = match &z {
            Some(z) => Some(factor_distance(&w.stacked(), z)?),
            None => None,
        };
        records.push(IterRecord {
            iter: t,
            normalized_error,
            dist,
            truncation_count: kept,
            median_residual: median,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });

        if t == config.max_iters || converged {
            break;
        }

        let (grad_u, grad_v) = gradients_from_coeffs(instance, &w, &coeffs, config.lambda, &mut scratch);
        let mut next = w.clone();
        next.u.axpy(-step_u, &grad_u);
        next.v.axpy(-step_v, &grad_v);
        if !next.is_finite() {
            stop = StopReason::Diverged;
            break;
        }
        if config.stop_tol > 0.0 {
            let change = (grad_u.frobenius_norm() * step_u).hypot(grad_v.frobenius_norm() * step_v);
            let size = w.u.frobenius_norm().hypot(w.v.frobenius_norm()).max(f64::MIN_POSITIVE);
            if change / size < config.stop_tol {
                converged = true;
                stop = StopReason::Converged;
            }
        }
        w = next;
    }

    Ok(RecoveryTrace { records, factors: w, stop, algorithm: config.algorithm })
}

/// `E[ξ² 1{|ξ| ≤ c}]` for `ξ ~ N(0, 1)`:
/// `erf(c/√2) − c √(2/π) e^{−c²/2}`. Zero for `c ≤ 0`.
pub fn gamma1(c: f64) -> f64 {
    if c <= 0.0 {
        return 0.0;
    }
    let tail = c * (2.0 / std::f64::consts::PI).sqrt() * (-0.5 * c * c).exp();
    erf(c / std::f64::consts::SQRT_2) - tail
}

/// Initialization threshold from the analysis: `2 ln(r^{1/4} κ̄₀^{1/2} + 20)`.
pub fn theory_alpha_y(rank: usize, kappa_bar_bound: f64) -> Result<f64> {
    if rank == 0 {
        return Err(invalid("rank must be at least 1"));
    }
    if !(kappa_bar_bound >= 1.0 && kappa_bar_bound.is_finite()) {
        return Err(invalid(format!("average condition number bound must be >= 1, got {kappa_bar_bound}")));
    }
    Ok(2.0 * ((rank as f64).powf(0.25) * kappa_bar_bound.sqrt() + 20.0).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensing::{generate_instance, InstanceParams, Seeds, SensingEnsemble, StoragePolicy};

    fn instance(n1: usize, n2: usize, r: usize, m: usize, s: f64, seed: u64) -> ProblemInstance {
        let p = InstanceParams::new(n1, n2, r, m).with_outliers(s);
        generate_instance(&p, Seeds { ensemble: seed, instance: seed.wrapping_add(1) }).unwrap()
    }

    /// Instance with explicitly chosen measurements.
    fn with_measurements(n1: usize, n2: usize, r: usize, y: Vec<f64>) -> ProblemInstance {
        let mut inst = instance(n1, n2, r, y.len(), 0.0, 3);
        inst.measurements = y;
        inst.truth = None;
        inst
    }

    #[test]
    fn mask_examples() {
        let t = truncation_mask(&[1.0, -1.0, 10.0, 0.5, -0.2], 6.0).unwrap();
        assert_eq!(t.median, 1.0);
        assert_eq!(t.mask, vec![true, true, false, true, true]);
        assert_eq!(t.kept, 4);

        let t = truncation_mask(&[2.5; 6], 6.0).unwrap();
        assert_eq!(t.median, 2.5);
        assert!(t.mask.iter().all(|&k| k));

        let t = truncation_mask(&[0.0; 4], 6.0).unwrap();
        assert_eq!(t.median, 0.0);
        assert!(t.mask.iter().all(|&k| k));

        assert!(truncation_mask(&[], 6.0).is_err());
    }

    #[test]
    fn zero_measurements_give_degenerate_init() {
        let inst = with_measurements(4, 3, 1, vec![0.0; 20]);
        let init = truncated_spectral_init(&inst, &RecoveryConfig::new(1)).unwrap();
        assert!(init.degenerate);
        assert_eq!(init.factors.u.frobenius_norm(), 0.0);
        assert_eq!(init.factors.v.frobenius_norm(), 0.0);
        assert!(matches!(run_recovery(&inst, &RecoveryConfig::new(1)), Err(Error::InitFailure(_))));
    }

    #[test]
    fn untruncated_single_measurement_init() {
        let inst = with_measurements(4, 3, 2, vec![1.7]);
        let config = RecoveryConfig { alpha_y: f64::INFINITY, ..RecoveryConfig::new(2) };
        let init = truncated_spectral_init(&inst, &config).unwrap();
        let k = inst.ensemble.matrix(0).scale(1.7);
        let expected = FactorPair::from_svd(&rank_r_svd(&k, 2).unwrap());
        // compare products, which are sign-invariant
        assert!(init.factors.product().sub(&expected.product()).frobenius_norm() < 1e-12);
        let uu = init.factors.u.t_matmul(&init.factors.u);
        let vv = init.factors.v.t_matmul(&init.factors.v);
        assert!(uu.sub(&vv).frobenius_norm() < 1e-12);
    }

    #[test]
    fn split_init_uses_first_half() {
        let mut y = vec![1.0; 9];
        y[4] = 1e6; // in the first half: dropped by the threshold
        let inst = with_measurements(3, 3, 1, y);
        let config = RecoveryConfig { split_init: true, ..RecoveryConfig::new(1) };
        let init = truncated_spectral_init(&inst, &config).unwrap();
        assert_eq!(init.kept, 4);
        let mut k = DenseMatrix::zeros(3, 3);
        for i in 0..4 {
            k.axpy(1.0 / 5.0, &inst.ensemble.matrix(i));
        }
        let expected = FactorPair::from_svd(&rank_r_svd(&k, 1).unwrap());
        assert!(init.factors.product().sub(&expected.product()).frobenius_norm() < 1e-12);

        let one = with_measurements(3, 3, 1, vec![1.0]);
        assert!(truncated_spectral_init(&one, &config).is_err());
    }

    #[test]
    fn init_rank_checked() {
        let inst = instance(4, 3, 1, 10, 0.0, 1);
        assert!(truncated_spectral_init(&inst, &RecoveryConfig::new(4)).is_err());
    }

    #[test]
    fn gradients_vanish_at_balanced_truth() {
        let inst = instance(6, 5, 2, 60, 0.0, 7);
        let gt = inst.ground_truth().unwrap().unwrap();
        let (gu, gv) = tgd_gradients(&inst, &gt.balanced, &[true; 60], default_lambda()).unwrap();
        assert!(gu.frobenius_norm() < 1e-12 * gt.frob_norm);
        assert!(gv.frobenius_norm() < 1e-12 * gt.frob_norm);
    }

    #[test]
    fn scalar_gradient_by_hand() {
        let inst = with_measurements(2, 2, 1, vec![0.3]);
        let u = DenseMatrix::new(2, 1, vec![0.5, -1.0]).unwrap();
        let v = DenseMatrix::new(2, 1, vec![2.0, 0.25]).unwrap();
        let w = FactorPair::new(u.clone(), v.clone()).unwrap();
        let (gu, gv) = tgd_gradients(&inst, &w, &[true], 0.0).unwrap();
        let a = inst.ensemble.matrix(0);
        let res = a.inner(&u.matmul_t(&v)) - 0.3;
        let expected_u = a.matmul(&v).scale(res / 2.0);
        let expected_v = a.t_matmul(&u).scale(res / 2.0);
        assert!(gu.sub(&expected_u).frobenius_norm() < 1e-12);
        assert!(gv.sub(&expected_v).frobenius_norm() < 1e-12);
    }

    #[test]
    fn gradient_shape_errors() {
        let inst = instance(4, 3, 1, 10, 0.0, 1);
        let bad = FactorPair::new(DenseMatrix::zeros(3, 1), DenseMatrix::zeros(3, 1)).unwrap();
        assert!(tgd_gradients(&inst, &bad, &[true; 10], 0.1).is_err());
        let good = FactorPair::new(DenseMatrix::zeros(4, 1), DenseMatrix::zeros(3, 1)).unwrap();
        assert!(tgd_gradients(&inst, &good, &[true; 9], 0.1).is_err());
    }

    #[test]
    fn truth_is_a_fixed_point() {
        let inst = instance(8, 6, 2, 200, 0.0, 5);
        let gt = inst.ground_truth().unwrap().unwrap();
        let config = RecoveryConfig::new(2).with_max_iters(20);
        let trace = run_recovery_from(&inst, &config, gt.balanced.clone()).unwrap();
        assert_eq!(trace.records.len(), 21);
        for r in &trace.records {
            assert!(r.normalized_error.unwrap() < 1e-14);
            assert!(r.dist.unwrap() < 1e-12);
        }
    }

    #[test]
    fn small_clean_recovery_converges() {
        let inst = instance(10, 8, 2, 300, 0.0, 11);
        let config = RecoveryConfig::new(2).with_max_iters(2000).with_stop_tol(1e-14);
        let trace = run_recovery(&inst, &config).unwrap();
        assert!(trace.final_error().unwrap() < 1e-8, "{:?}", trace.final_error());
        assert!(trace.records.len() <= 2001);
        assert!(trace.records.iter().all(|r| r.truncation_count <= 300));
    }

    #[test]
    fn config_validation() {
        assert!(RecoveryConfig { alpha_h: 1.0, ..RecoveryConfig::new(1) }.validate().is_err());
        assert!(RecoveryConfig { step_mu: 0.0, ..RecoveryConfig::new(1) }.validate().is_err());
        assert!(RecoveryConfig::new(0).validate().is_err());
        assert!(RecoveryConfig::new(3).validate().is_ok());
        assert!((default_lambda() - 0.249_588_573_658_775).abs() < 1e-12);
    }

    #[test]
    fn gamma1_values() {
        // high-precision evaluation of the closed form
        assert!((gamma1(3.9) - 0.998_354_294_635_101_2).abs() < 1e-12);
        assert!((gamma1(40.0) - 1.0).abs() < 1e-12);
        assert_eq!(gamma1(0.0), 0.0);
    }

    #[test]
    fn gamma1_matches_quadrature() {
        // composite Simpson on x² φ(x) over [−1, 1]
        let n = 20_000;
        let h = 2.0 / n as f64;
        let f = |x: f64| x * x * (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut sum = f(-1.0) + f(1.0);
        for i in 1..n {
            let x = -1.0 + i as f64 * h;
            sum += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        let quad = sum * h / 3.0;
        assert!((gamma1(1.0) - quad).abs() < 1e-9);
    }

    #[test]
    fn theory_alpha_y_values() {
        let v = theory_alpha_y(1, 1.0).unwrap();
        assert!((v - 2.0 * 21f64.ln()).abs() < 1e-12);
        assert!((v - 6.089_044_875_446_846).abs() < 1e-12);
        assert!(theory_alpha_y(16, 4.0).unwrap() > v);
        assert!(theory_alpha_y(0, 1.0).is_err());
        assert!(theory_alpha_y(1, 0.0).is_err());
    }

    #[test]
    fn csv_export_has_schema_columns() {
        let inst = instance(6, 5, 1, 80, 0.0, 2);
        let trace = run_recovery(&inst, &RecoveryConfig::new(1).with_max_iters(3)).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], TRACE_CSV_HEADER);
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[1].split(',').count(), 6);
    }

    #[test]
    fn factor_block_json() {
        let w = FactorPair::new(DenseMatrix::identity(2), DenseMatrix::zeros(3, 2)).unwrap();
        let text = serde_json::to_string(&w).unwrap();
        assert!(text.starts_with("{\"u\":{\"rows\":2,\"cols\":2,\"data\":"));
        let back: FactorPair = serde_json::from_str(&text).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn ensemble_reuse_is_independent_of_storage() {
        let inst = instance(5, 4, 1, 50, 0.0, 4);
        let mut regen = inst.clone();
        regen.ensemble = SensingEnsemble::new(
            50,
            5,
            4,
            inst.ensemble_seed,
            StoragePolicy::Fixed(crate::sensing::Storage::Regenerate),
        )
        .unwrap();
        let config = RecoveryConfig::new(1).with_max_iters(10);
        let a = run_recovery(&inst, &config).unwrap();
        let b = run_recovery(&regen, &config).unwrap();
        assert_eq!(a.factors, b.factors);
    }
}
