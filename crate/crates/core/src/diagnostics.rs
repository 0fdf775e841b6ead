//! Monte-Carlo checks of the statistical facts the method rests on.
//!
//! * concentration of sample quantiles of `|𝒜(G)|` around `θ_τ ‖G‖_F`,
//! * the deterministic quantile sandwich under a fraction of corruptions,
//! * the restricted isometry of the Gaussian ensemble on low-rank matrices,
//! * a sampled probe of the regularity condition near the truth.
//!
//! Every check is a pure function of its seed. Trials run in parallel and
//! are collected in trial order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{invalid, Result};
use crate::linalg::{procrustes_align, rank_r_svd, select_quantile_in_place, DenseMatrix, Quantile};
use crate::recovery::{tgd_gradients, truncation_mask, FactorPair, RecoveryConfig};
use crate::seeding::derive_seed;
use crate::sensing::{apply_forward, outlier_count, ProblemInstance, SensingEnsemble, Storage, StoragePolicy};

/// Half-width of the acceptance interval for quantile concentration at
/// desk scale.
pub const CONCENTRATION_TOLERANCE: f64 = 0.03;

/// Population quantile of `|ξ|`, `ξ ~ N(0,1)`: `Φ⁻¹((1 + τ)/2)`.
pub fn half_normal_quantile(tau: Quantile) -> f64 {
    let normal = Normal::standard();
    normal.inverse_cdf((1.0 + tau.tau()) / 2.0)
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Random rank-`rank` matrix with unit Frobenius norm.
fn unit_low_rank(rng: &mut ChaCha8Rng, n1: usize, n2: usize, rank: usize) -> DenseMatrix {
    let g = gaussian(rng, n1, rank).matmul_t(&gaussian(rng, n2, rank));
    let norm = g.frobenius_norm();
    g.scale(1.0 / norm)
}

fn random_orthogonal(rng: &mut ChaCha8Rng, r: usize) -> Result<DenseMatrix> {
    let svd = rank_r_svd(&gaussian(rng, r, r), r)?;
    Ok(svd.left.matmul_t(&svd.right))
}

fn check_dims(n1: usize, n2: usize, rank: usize, m: usize, trials: usize) -> Result<()> {
    if n1 == 0 || n2 == 0 || rank == 0 || rank > n1.min(n2) {
        return Err(invalid(format!("invalid dimensions {n1}x{n2} with rank {rank}")));
    }
    if m == 0 || trials == 0 {
        return Err(invalid("m and trials must be positive"));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct ConcentrationReport {
    pub tau: f64,
    pub n1: usize,
    pub n2: usize,
    /// Rank of the probe matrices `G` (twice the factor rank).
    pub probe_rank: usize,
    pub m: usize,
    pub trials: usize,
    pub seed: u64,
    /// Ratios `θ_τ(|𝒜(G)|) / ‖G‖_F`, one per trial.
    pub ratios: Vec<f64>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub target: f64,
    pub target_interval: (f64, f64),
    pub pass: bool,
}

/// Sample quantile of `|𝒜(G)|` for random unit-norm rank-`2r` matrices `G`,
/// each against a fresh ensemble, compared with `Φ⁻¹((1+τ)/2) ± 0.03`.
pub fn median_concentration_check(
    n1: usize,
    n2: usize,
    rank: usize,
    m: usize,
    trials: usize,
    tau: Quantile,
    seed: u64,
) -> Result<ConcentrationReport> {
    check_dims(n1, n2, rank, m, trials)?;
    let probe_rank = 2 * rank;
    if probe_rank > n1.min(n2) {
        return Err(invalid(format!("rank-{probe_rank} probes do not fit in {n1}x{n2}")));
    }
    let ratios = (0..trials)
        .into_par_iter()
        .map(|t| {
            let trial_seed = derive_seed(seed, &[t as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
            let g = unit_low_rank(&mut rng, n1, n2, probe_rank);
            let ensemble = SensingEnsemble::new(m, n1, n2, rng.random(), StoragePolicy::Fixed(Storage::Regenerate))?;
            let mut abs: Vec<f64> = apply_forward(&ensemble, &g)?.iter().map(|v| v.abs()).collect();
            Ok(select_quantile_in_place(&mut abs, tau))
        })
        .collect::<Result<Vec<f64>>>()?;

    let target = half_normal_quantile(tau);
    let target_interval = (target - CONCENTRATION_TOLERANCE, target + CONCENTRATION_TOLERANCE);
    let min = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let max = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = ratios.iter().sum::<f64>() / trials as f64;
    Ok(ConcentrationReport {
        tau: tau.tau(),
        n1,
        n2,
        probe_rank,
        m,
        trials,
        seed,
        pass: min >= target_interval.0 && max <= target_interval.1,
        ratios,
        mean,
        min,
        max,
        target,
        target_interval,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SandwichViolation {
    pub trial: usize,
    pub corrupted_indices: Vec<usize>,
    pub lower: f64,
    pub value: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SandwichReport {
    pub p: f64,
    pub s: f64,
    pub trials: usize,
    pub corrupted_per_trial: usize,
    pub violations: usize,
    pub counterexample: Option<SandwichViolation>,
    pub pass: bool,
}

/// `θ_{p−s}(clean) ≤ θ_p(corrupted) ≤ θ_{p+s}(clean)` for `⌊sm⌋` corrupted
/// entries, or the offending bounds.
pub fn quantile_sandwich(clean: &[f64], corrupted: &[f64], p: f64, s: f64) -> Result<Option<(f64, f64, f64)>> {
    if clean.len() != corrupted.len() || clean.is_empty() {
        return Err(invalid("clean and corrupted samples must be nonempty and of equal length"));
    }
    if !(s >= 0.0 && s < p && p < 1.0 - s) {
        return Err(invalid(format!("need 0 <= s < p < 1 - s, got s = {s}, p = {p}")));
    }
    let mut scratch = clean.to_vec();
    let lower = select_quantile_in_place(&mut scratch, Quantile::new(p - s)?);
    let upper = select_quantile_in_place(&mut scratch, Quantile::new(p + s)?);
    scratch.copy_from_slice(corrupted);
    let value = select_quantile_in_place(&mut scratch, Quantile::new(p)?);
    Ok((lower <= value && value <= upper).then_some((lower, value, upper)))
}

/// Corrupt `⌊s·m⌋` random entries of `clean` with values from `corruptor`
/// (called with the entry index and its clean value) and check the quantile
/// sandwich, `trials` times.
pub fn corrupted_quantile_sandwich_check<F>(
    clean: &[f64],
    s: f64,
    p: f64,
    trials: usize,
    seed: u64,
    mut corruptor: F,
) -> Result<SandwichReport>
where
    F: FnMut(&mut ChaCha8Rng, usize, f64) -> f64,
{
    if clean.is_empty() {
        return Err(invalid("clean sample is empty"));
    }
    if !(s >= 0.0 && s < p && p < 1.0 - s) {
        return Err(invalid(format!("quantile {p} outside the admissible band ({s}, {})", 1.0 - s)));
    }
    let m = clean.len();
    let count = outlier_count(s, m);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    let mut counterexample = None;
    let mut corrupted = clean.to_vec();
    for trial in 0..trials {
        corrupted.copy_from_slice(clean);
        let mut idx = rand::seq::index::sample(&mut rng, m, count).into_vec();
        idx.sort_unstable();
        for &i in &idx {
            corrupted[i] = corruptor(&mut rng, i, clean[i]);
        }
        if quantile_sandwich(clean, &corrupted, p, s)?.is_none() {
            violations += 1;
            if counterexample.is_none() {
                let mut scratch = clean.to_vec();
                let lower = select_quantile_in_place(&mut scratch, Quantile::new(p - s)?);
                let upper = select_quantile_in_place(&mut scratch, Quantile::new(p + s)?);
                scratch.copy_from_slice(&corrupted);
                let value = select_quantile_in_place(&mut scratch, Quantile::new(p)?);
                counterexample = Some(SandwichViolation { trial, corrupted_indices: idx, lower, value, upper });
            }
        }
    }
    Ok(SandwichReport { p, s, trials, corrupted_per_trial: count, violations, counterexample, pass: violations == 0 })
}

#[derive(Debug, Clone, Serialize)]
pub struct RipReport {
    pub n1: usize,
    pub n2: usize,
    pub rank: usize,
    pub m: usize,
    pub seed: u64,
    /// `‖𝒜(M)‖₂ / (√m ‖M‖_F)` per trial.
    pub ratios: Vec<f64>,
    /// `max |ratio − 1|`.
    pub delta_hat: f64,
}

/// Empirical restricted isometry constant over random rank-`rank` matrices,
/// each against a fresh ensemble.
pub fn rip_check(n1: usize, n2: usize, rank: usize, m: usize, trials: usize, seed: u64) -> Result<RipReport> {
    check_dims(n1, n2, rank, m, trials)?;
    let ratios = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[t as u64]));
            let target = unit_low_rank(&mut rng, n1, n2, rank);
            let ensemble = SensingEnsemble::new(m, n1, n2, rng.random(), StoragePolicy::Fixed(Storage::Regenerate))?;
            let y = apply_forward(&ensemble, &target)?;
            let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            Ok(norm / (m as f64).sqrt())
        })
        .collect::<Result<Vec<f64>>>()?;
    let delta_hat = ratios.iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max);
    Ok(RipReport { n1, n2, rank, m, seed, ratios, delta_hat })
}

/// `β` from the closing statement of the regularity certificate, reported
/// next to the caller's `β`.
pub const RC_ALTERNATE_BETA: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RcPoint {
    pub dist: f64,
    /// `⟨∇h(W), W − ZQ⟩`.
    pub lhs: f64,
    /// `σ_r²(Z)/α ‖W − ZQ‖_F² + ‖∇h(W)‖_F² / (β ‖Z‖²)`.
    pub rhs: f64,
    /// Same with `β` replaced by [`RC_ALTERNATE_BETA`].
    pub rhs_alternate: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RcProbeReport {
    pub samples: usize,
    pub alpha: f64,
    pub beta: f64,
    pub alternate_beta: f64,
    pub eps_fraction: f64,
    /// `eps_fraction · σ_r(Z)`.
    pub radius: f64,
    pub points: Vec<RcPoint>,
    pub violations: usize,
    pub violations_alternate: usize,
}

/// Both sides of the regularity inequality at `w`, using the median-truncated
/// gradient at `w` and the balanced truth `z`.
pub fn rc_sides(
    instance: &ProblemInstance,
    config: &RecoveryConfig,
    w: &FactorPair,
    z: &DenseMatrix,
    alpha: f64,
    beta: f64,
) -> Result<RcPoint> {
    let stacked = w.stacked();
    let q = procrustes_align(&stacked, z)?;
    let h = stacked.sub(&z.matmul(&q));

    let mut pred = apply_forward(&instance.ensemble, &w.product())?;
    for (p, y) in pred.iter_mut().zip(&instance.measurements) {
        *p = y - *p;
    }
    let mask = truncation_mask(&pred, config.alpha_h)?.mask;
    let (gu, gv) = tgd_gradients(instance, w, &mask, config.lambda)?;
    let grad = gu.vstack(&gv)?;

    let z_sv = crate::linalg::singular_values(z)?;
    let sigma_r = z_sv[w.rank() - 1];
    let z_norm = z_sv[0];
    let dist = h.frobenius_norm();
    let lhs = grad.inner(&h);
    let curvature = sigma_r * sigma_r / alpha * dist * dist;
    let grad_sq = grad.inner(&grad);
    Ok(RcPoint {
        dist,
        lhs,
        rhs: curvature + grad_sq / (beta * z_norm * z_norm),
        rhs_alternate: curvature + grad_sq / (RC_ALTERNATE_BETA * z_norm * z_norm),
    })
}

fn violates(p: &RcPoint, rhs: f64, scale: f64) -> bool {
    // roundoff slack for points numerically at the truth
    p.lhs < rhs - 1e-12 * scale
}

/// Sample `W = ZP + Δ` with random orthogonal `P` and random `Δ` of norm
/// uniform in `(0, eps_fraction · σ_r(Z)]`, and count points where the
/// regularity inequality fails.
pub fn rc_probe(
    instance: &ProblemInstance,
    config: &RecoveryConfig,
    alpha: f64,
    beta: f64,
    eps_fraction: f64,
    samples: usize,
    seed: u64,
) -> Result<RcProbeReport> {
    if samples == 0 {
        return Err(invalid("rc_probe needs at least one sample"));
    }
    if !(alpha > 0.0 && beta > 0.0 && eps_fraction >= 0.0) {
        return Err(invalid("alpha and beta must be positive and eps_fraction nonnegative"));
    }
    let truth =
        instance.ground_truth()?.ok_or_else(|| invalid("rc_probe needs an instance with known ground truth"))?;
    let z = truth.z();
    let r = truth.rank();
    let (sigma_r, _) = truth.z_singular_range()?;
    let radius = eps_fraction * sigma_r;
    let (n1, n2) = (instance.n1(), instance.n2());

    let points = (0..samples)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[k as u64]));
            let p = random_orthogonal(&mut rng, r)?;
            let delta = gaussian(&mut rng, n1 + n2, r);
            let length = radius * (1.0 - rng.random::<f64>());
            let delta = delta.scale(length / delta.frobenius_norm());
            let w = z.matmul(&p).add(&delta);
            let (u, v) = w.split_rows(n1);
            rc_sides(instance, config, &FactorPair { u, v }, &z, alpha, beta)
        })
        .collect::<Result<Vec<RcPoint>>>()?;

    let scale = sigma_r * sigma_r;
    Ok(RcProbeReport {
        samples,
        alpha,
        beta,
        alternate_beta: RC_ALTERNATE_BETA,
        eps_fraction,
        radius,
        violations: points.iter().filter(|p| violates(p, p.rhs, scale)).count(),
        violations_alternate: points.iter().filter(|p| violates(p, p.rhs_alternate, scale)).count(),
        points,
    })
}

/// Mask of samples with `|r_i| ≤ threshold`.
pub fn fixed_threshold_mask(residuals: &[f64], threshold: f64) -> Vec<bool> {
    residuals.iter().map(|r| r.abs() <= threshold).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensing::{generate_instance, InstanceParams, Seeds};
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn population_constants() {
        let q = |t| half_normal_quantile(Quantile::new(t).unwrap());
        assert_eq!(format!("{:.4}", q(0.49)), "0.6588");
        assert_eq!(format!("{:.4}", q(0.5)), "0.6745");
        assert_eq!(format!("{:.4}", q(0.51)), "0.6903");
    }

    #[test]
    fn concentration_small_run() {
        let report = median_concentration_check(10, 10, 1, 3000, 5, Quantile::MEDIAN, 3).unwrap();
        assert_eq!(report.ratios.len(), 5);
        assert!(report.min <= report.mean && report.mean <= report.max);
        assert!(report.pass, "{report:?}");
        let again = median_concentration_check(10, 10, 1, 3000, 5, Quantile::MEDIAN, 3).unwrap();
        assert_eq!(report.ratios, again.ratios);
        assert!(median_concentration_check(3, 3, 2, 10, 1, Quantile::MEDIAN, 0).is_err());
    }

    #[test]
    fn sandwich_examples() {
        let clean: Vec<f64> = (1..=100).map(f64::from).collect();
        let r = corrupted_quantile_sandwich_check(&clean, 0.0, 0.5, 10, 1, |_, _, v| v).unwrap();
        assert!(r.pass);
        assert_eq!(r.corrupted_per_trial, 0);
        assert_eq!(quantile_sandwich(&clean, &clean, 0.5, 0.0).unwrap(), Some((50.0, 50.0, 50.0)));

        let r = corrupted_quantile_sandwich_check(&clean, 0.05, 0.5, 50, 2, |_, _, _| 1e9).unwrap();
        assert!(r.pass);
        assert_eq!(r.corrupted_per_trial, 5);
        let r = corrupted_quantile_sandwich_check(&clean, 0.05, 0.5, 50, 2, |_, _, _| -1e9).unwrap();
        assert!(r.pass);

        let mut corrupted = clean.clone();
        for v in corrupted.iter_mut().take(5) {
            *v = 1e9;
        }
        let (lo, mid, hi) = quantile_sandwich(&clean, &corrupted, 0.5, 0.05).unwrap().unwrap();
        assert_eq!((lo, hi), (45.0, 55.0));
        assert!((45.0..=55.0).contains(&mid));
    }

    #[test]
    fn sandwich_rejects_bad_band() {
        let clean = vec![1.0; 10];
        assert!(corrupted_quantile_sandwich_check(&clean, 0.3, 0.2, 1, 0, |_, _, v| v).is_err());
        assert!(corrupted_quantile_sandwich_check(&clean, 0.3, 0.75, 1, 0, |_, _, v| v).is_err());
    }

    #[test]
    fn sandwich_detects_too_many_corruptions() {
        // corrupting 10 entries while claiming s = 0.05 must be caught
        let clean: Vec<f64> = (1..=100).map(f64::from).collect();
        let mut corrupted = clean.clone();
        for v in corrupted.iter_mut().take(10) {
            *v = 1e9;
        }
        assert!(quantile_sandwich(&clean, &corrupted, 0.5, 0.05).unwrap().is_none());
    }

    #[test]
    fn rip_large_m_small_dims() {
        let r = rip_check(10, 10, 1, 50_000, 5, 9).unwrap();
        assert!(r.delta_hat < 0.05, "{}", r.delta_hat);
        let again = rip_check(10, 10, 1, 50_000, 5, 9).unwrap();
        assert_eq!(r.delta_hat, again.delta_hat);
    }

    fn clean_instance(seed: u64) -> ProblemInstance {
        let p = InstanceParams::new(12, 10, 2, 600);
        generate_instance(&p, Seeds { ensemble: seed, instance: seed + 1 }).unwrap()
    }

    #[test]
    fn rc_sides_vanish_at_truth() {
        let inst = clean_instance(4);
        let gt = inst.ground_truth().unwrap().unwrap();
        let point = rc_sides(&inst, &RecoveryConfig::new(2), &gt.balanced, &gt.z(), 20.0, 1000.0).unwrap();
        assert!(point.lhs.abs() < 1e-20 && point.rhs.abs() < 1e-20, "{point:?}");
        assert!(!violates(&point, point.rhs, gt.sigma_r));
    }

    #[test]
    fn rc_probe_reports_consistent_counts() {
        let inst = clean_instance(5);
        let r = rc_probe(&inst, &RecoveryConfig::new(2), 20.0, 1000.0, 1.0 / 24.0, 8, 1).unwrap();
        assert_eq!(r.points.len(), 8);
        assert!(r.violations <= r.samples && r.violations_alternate <= r.samples);
        // a smaller β only enlarges the right-hand side
        assert!(r.violations <= r.violations_alternate);
        for p in &r.points {
            assert!(p.dist <= r.radius * (1.0 + 1e-12));
        }
    }

    #[test]
    fn truncation_mask_between_fixed_threshold_masks() {
        // whenever 0.65‖Δ‖ ≤ med(|r|) ≤ 0.70‖Δ‖, the adaptive mask sits
        // between the two fixed-threshold masks
        let inst = clean_instance(6);
        let gt = inst.ground_truth().unwrap().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let alpha_h = 6.0;
        let mut checked = 0;
        for _ in 0..40 {
            let u = gt.balanced.u.add(&gaussian(&mut rng, 12, 2).scale(0.05));
            let v = gt.balanced.v.add(&gaussian(&mut rng, 10, 2).scale(0.05));
            let w = FactorPair { u, v };
            let delta = gt.m_matrix.sub(&w.product()).frobenius_norm();
            let pred = apply_forward(&inst.ensemble, &w.product()).unwrap();
            let residuals: Vec<f64> = inst.measurements.iter().zip(&pred).map(|(y, p)| y - p).collect();
            let adaptive = truncation_mask(&residuals, alpha_h).unwrap();
            if !(0.65 * delta <= adaptive.median && adaptive.median <= 0.70 * delta) {
                continue;
            }
            checked += 1;
            let inner = fixed_threshold_mask(&residuals, 0.65 * alpha_h * delta);
            let outer = fixed_threshold_mask(&residuals, 0.70 * alpha_h * delta);
            for i in 0..residuals.len() {
                assert!(!inner[i] || adaptive.mask[i]);
                assert!(!adaptive.mask[i] || outer[i]);
            }
        }
        assert!(checked > 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn sandwich_holds_for_any_corruption(
            clean in prop::collection::vec(-1e12f64..1e12, 5..120),
            s in 0.0f64..0.3,
            p_frac in 0.01f64..0.99,
            extreme in prop::sample::select(vec![1e12, -1e12, 0.0]),
            seed in any::<u64>(),
        ) {
            let p = s + p_frac * (1.0 - 2.0 * s);
            prop_assume!(p > s && p < 1.0 - s);
            let report = corrupted_quantile_sandwich_check(&clean, s, p, 5, seed, |rng, _, _| {
                if rng.random::<bool>() { extreme } else { rng.random_range(-1e12..1e12) }
            }).unwrap();
            prop_assert!(report.pass, "{:?}", report.counterexample);
        }
    }
}
