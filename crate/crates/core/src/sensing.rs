//! Gaussian sensing ensembles, synthetic ground truth, and corrupted
//! measurement generation.
//!
//! Every random quantity here is a pure function of a seed. The `i`-th
//! sensing matrix is drawn from a ChaCha8 stream keyed by
//! `(ensemble_seed, stream = i)`, so an ensemble can either be stored in
//! full or regenerated on demand and both give bit-identical matrices.
//!
//! Sums over measurements (the adjoint map) are reduced in fixed blocks of
//! [`REDUCTION_BLOCK`] consecutive indices, and the block partials are added
//! in index order. The result therefore does not depend on the number of
//! worker threads.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{dot, rank_r_svd, singular_values, DenseMatrix};
use crate::recovery::FactorPair;

/// Number of consecutive measurements summed together before partial sums
/// are combined.
pub const REDUCTION_BLOCK: usize = 256;

/// Default memory budget above which ensembles are regenerated instead of
/// stored: 1 GiB.
pub const DEFAULT_MEMORY_BUDGET: u64 = 1 << 30;

/// Default outlier variance multiplier: `η_i ~ N(0, 10⁴‖M‖_F²)`.
pub const DEFAULT_OUTLIER_SCALE: f64 = 1e4;

/// Noise multiplier used by the bounded-noise experiments.
pub const STABILITY_NOISE_SCALE: f64 = 0.05;

/// How sensing matrices are held in memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Storage {
    /// All `m` matrices stored contiguously.
    Materialized,
    /// Each matrix regenerated from its stream whenever it is used.
    Regenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoragePolicy {
    /// Materialize when the ensemble fits in `budget_bytes`, else regenerate.
    Auto {
        budget_bytes: u64,
    },
    Fixed(Storage),
}

impl Default for StoragePolicy {
    fn default() -> Self {
        StoragePolicy::Auto { budget_bytes: DEFAULT_MEMORY_BUDGET }
    }
}

impl StoragePolicy {
    fn resolve(self, m: usize, n1: usize, n2: usize) -> Storage {
        match self {
            StoragePolicy::Fixed(s) => s,
            StoragePolicy::Auto { budget_bytes } => {
                let bytes = (m as u128) * (n1 as u128) * (n2 as u128) * 8;
                if bytes <= budget_bytes as u128 {
                    Storage::Materialized
                } else {
                    Storage::Regenerate
                }
            }
        }
    }
}

/// `m` sensing matrices `A_i ∈ ℝ^{n1×n2}` with i.i.d. standard normal entries.
#[derive(Clone)]
pub struct SensingEnsemble {
    m: usize,
    n1: usize,
    n2: usize,
    seed: u64,
    storage: Storage,
    data: Option<Arc<Vec<f64>>>,
}

impl std::fmt::Debug for SensingEnsemble {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SensingEnsemble")
            .field("m", &self.m)
            .field("n1", &self.n1)
            .field("n2", &self.n2)
            .field("seed", &self.seed)
            .field("storage", &self.storage)
            .finish()
    }
}

fn fill_sensing_matrix(seed: u64, index: usize, out: &mut [f64]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    for v in out.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
}

impl SensingEnsemble {
    pub fn new(m: usize, n1: usize, n2: usize, seed: u64, policy: StoragePolicy) -> Result<Self> {
        if m == 0 || n1 == 0 || n2 == 0 {
            return Err(invalid(format!("ensemble needs positive m, n1, n2; got {m}, {n1}, {n2}")));
        }
        let storage = policy.resolve(m, n1, n2);
        let data = match storage {
            Storage::Regenerate => None,
            Storage::Materialized => {
                let len = n1 * n2;
                let mut data = vec![0.0; m * len];
                data.par_chunks_mut(len).enumerate().for_each(|(i, row)| fill_sensing_matrix(seed, i, row));
                Some(Arc::new(data))
            }
        };
        Ok(Self { m, n1, n2, seed, storage, data })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n1(&self) -> usize {
        self.n1
    }

    pub fn n2(&self) -> usize {
        self.n2
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn storage(&self) -> Storage {
        self.storage
    }

    /// The `i`-th sensing matrix.
    pub fn matrix(&self, i: usize) -> DenseMatrix {
        assert!(i < self.m, "sensing matrix index {i} out of range");
        let len = self.n1 * self.n2;
        let data = match &self.data {
            Some(d) => d[i * len..(i + 1) * len].to_vec(),
            None => {
                let mut buf = vec![0.0; len];
                fill_sensing_matrix(self.seed, i, &mut buf);
                buf
            }
        };
        DenseMatrix::from_vec_unchecked(self.n1, self.n2, data)
    }

    /// Visit `A_i` (row-major) for each `i` in `range`, in order.
    fn for_each_in(&self, range: std::ops::Range<usize>, mut f: impl FnMut(usize, &[f64])) {
        let len = self.n1 * self.n2;
        match &self.data {
            Some(d) => {
                for i in range {
                    f(i, &d[i * len..(i + 1) * len]);
                }
            }
            None => {
                let mut buf = vec![0.0; len];
                for i in range {
                    fill_sensing_matrix(self.seed, i, &mut buf);
                    f(i, &buf);
                }
            }
        }
    }

    fn check_matrix(&self, m: &DenseMatrix) -> Result<()> {
        if m.shape() != (self.n1, self.n2) {
            return Err(invalid(format!("expected a {}x{} matrix, got {}x{}", self.n1, self.n2, m.rows(), m.cols())));
        }
        Ok(())
    }

    /// `out[i] = ⟨A_i, M⟩` for a row-major `n1×n2` buffer.
    pub(crate) fn forward_into(&self, flat: &[f64], out: &mut [f64]) {
        debug_assert_eq!(flat.len(), self.n1 * self.n2);
        debug_assert_eq!(out.len(), self.m);
        out.par_chunks_mut(REDUCTION_BLOCK).enumerate().for_each(|(b, chunk)| {
            let start = b * REDUCTION_BLOCK;
            self.for_each_in(start..start + chunk.len(), |i, a| chunk[i - start] = dot(a, flat));
        });
    }

    /// `Σ_i coeffs[i] · A_i`, skipping zero coefficients.
    pub(crate) fn adjoint_into(&self, coeffs: &[f64], out: &mut [f64]) {
        debug_assert_eq!(coeffs.len(), self.m);
        let len = self.n1 * self.n2;
        let partials: Vec<Vec<f64>> = coeffs
            .par_chunks(REDUCTION_BLOCK)
            .enumerate()
            .map(|(b, chunk)| {
                let start = b * REDUCTION_BLOCK;
                let mut acc = vec![0.0; len];
                if chunk.iter().any(|&c| c != 0.0) {
                    self.for_each_in(start..start + chunk.len(), |i, a| {
                        let c = chunk[i - start];
                        if c != 0.0 {
                            for (o, &x) in acc.iter_mut().zip(a) {
                                *o += c * x;
                            }
                        }
                    });
                }
                acc
            })
            .collect();
        out.iter_mut().for_each(|v| *v = 0.0);
        for p in &partials {
            for (o, x) in out.iter_mut().zip(p) {
                *o += x;
            }
        }
    }
}

/// `𝒜(M) = (⟨A_1, M⟩, …, ⟨A_m, M⟩)`.
pub fn apply_forward(e: &SensingEnsemble, m_matrix: &DenseMatrix) -> Result<Vec<f64>> {
    e.check_matrix(m_matrix)?;
    let mut out = vec![0.0; e.m];
    e.forward_into(m_matrix.as_slice(), &mut out);
    Ok(out)
}

/// `Σ_{i : mask_i} weights_i · A_i`.
pub fn apply_adjoint_weighted(e: &SensingEnsemble, weights: &[f64], mask: &[bool]) -> Result<DenseMatrix> {
    if weights.len() != e.m || mask.len() != e.m {
        return Err(invalid(format!(
            "weights ({}) and mask ({}) must both have length m = {}",
            weights.len(),
            mask.len(),
            e.m
        )));
    }
    let coeffs: Vec<f64> = weights.iter().zip(mask).map(|(&w, &keep)| if keep { w } else { 0.0 }).collect();
    let mut out = vec![0.0; e.n1 * e.n2];
    e.adjoint_into(&coeffs, &mut out);
    Ok(DenseMatrix::from_vec_unchecked(e.n1, e.n2, out))
}

/// Summary of the rank-r target `M = XYᵀ`.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub m_matrix: DenseMatrix,
    pub frob_norm: f64,
    pub sigma_1: f64,
    pub sigma_r: f64,
    /// `σ₁(M) / σ_r(M)`.
    pub condition_number: f64,
    /// `‖M‖_F / (√r σ_r(M))`.
    pub avg_condition_number: f64,
    /// Balanced factors `(C_L Σ^{1/2}, C_R Σ^{1/2})` of `M`, which satisfy
    /// `XᵀX = YᵀY`. Distances to the truth are measured against these.
    pub balanced: FactorPair,
}

impl GroundTruth {
    pub fn from_factors(x: &DenseMatrix, y: &DenseMatrix) -> Result<Self> {
        if x.cols() != y.cols() {
            return Err(invalid("ground-truth factors need the same number of columns"));
        }
        let r = x.cols();
        let m_matrix = x.matmul_t(y);
        let svd = rank_r_svd(&m_matrix, r)?;
        let sigma_1 = svd.singulars[0];
        let sigma_r = svd.singulars[r - 1];
        let frob_norm = m_matrix.frobenius_norm();
        let balanced = FactorPair::from_svd(&svd);
        Ok(Self {
            condition_number: sigma_1 / sigma_r,
            avg_condition_number: frob_norm / ((r as f64).sqrt() * sigma_r),
            m_matrix,
            frob_norm,
            sigma_1,
            sigma_r,
            balanced,
        })
    }

    pub fn rank(&self) -> usize {
        self.balanced.rank()
    }

    /// Stacked balanced factors `Z = [X; Y]`.
    pub fn z(&self) -> DenseMatrix {
        self.balanced.stacked()
    }

    /// `σ_r(Z)` and `‖Z‖` for the balanced stack. With balanced factors
    /// these are `√(2σ_r(M))` and `√(2σ₁(M))`.
    pub fn z_singular_range(&self) -> Result<(f64, f64)> {
        let s = singular_values(&self.z())?;
        Ok((s[self.rank() - 1], s[0]))
    }

    /// `‖M̂ − M‖_F / ‖M‖_F`.
    pub fn normalized_error(&self, estimate: &DenseMatrix) -> f64 {
        estimate.sub(&self.m_matrix).frobenius_norm() / self.frob_norm
    }
}

/// Generation parameters for a synthetic instance.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceParams {
    pub n1: usize,
    pub n2: usize,
    pub rank: usize,
    pub m: usize,
    /// Fraction `s ∈ [0, 1)` of measurements replaced by outliers.
    pub outlier_fraction: f64,
    /// Outlier variance multiplier: `η_i ~ N(0, outlier_scale · ‖M‖_F²)`.
    pub outlier_scale: f64,
    /// Bounded noise `w_i ~ noise_scale · σ_r(M) · U[−1, 1]`; zero disables it.
    pub noise_scale: f64,
    pub storage: StoragePolicy,
}

impl InstanceParams {
    pub fn new(n1: usize, n2: usize, rank: usize, m: usize) -> Self {
        Self {
            n1,
            n2,
            rank,
            m,
            outlier_fraction: 0.0,
            outlier_scale: DEFAULT_OUTLIER_SCALE,
            noise_scale: 0.0,
            storage: StoragePolicy::default(),
        }
    }

    pub fn with_outliers(mut self, fraction: f64) -> Self {
        self.outlier_fraction = fraction;
        self
    }

    pub fn with_noise(mut self, noise_scale: f64) -> Self {
        self.noise_scale = noise_scale;
        self
    }

    pub fn with_storage(mut self, storage: StoragePolicy) -> Self {
        self.storage = storage;
        self
    }

    fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n1 == 0 || self.n2 == 0 {
            problems.push(format!("dimensions must be positive, got {}x{}", self.n1, self.n2));
        }
        if self.rank == 0 || self.rank > self.n1.min(self.n2) {
            problems.push(format!("rank {} out of range for {}x{}", self.rank, self.n1, self.n2));
        }
        if self.m == 0 {
            problems.push("m must be positive".into());
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            problems.push(format!("outlier fraction must lie in [0, 1), got {}", self.outlier_fraction));
        }
        if !(self.outlier_scale >= 0.0 && self.outlier_scale.is_finite()) {
            problems.push(format!("outlier scale must be finite and nonnegative, got {}", self.outlier_scale));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            problems.push(format!("noise scale must be finite and nonnegative, got {}", self.noise_scale));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(invalid(problems.join("; ")))
        }
    }
}

/// `⌊s·m⌋`, treating products within rounding error of an integer as exact.
pub fn outlier_count(fraction: f64, m: usize) -> usize {
    let x = fraction * m as f64;
    let nearest = x.round();
    if (x - nearest).abs() <= 1e-9 * x.max(1.0) {
        nearest as usize
    } else {
        x.floor() as usize
    }
}

/// Seeds addressing one instance: the ensemble and everything else.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub ensemble: u64,
    pub instance: u64,
}

/// Information handed to a custom outlier generator.
#[derive(Debug, Clone, Copy)]
pub struct OutlierContext {
    pub index: usize,
    pub clean_value: f64,
    pub frob_norm: f64,
}

// Stream ids inside the instance seed.
const STREAM_FACTORS: u64 = 0;
const STREAM_SUPPORT: u64 = 1;
const STREAM_OUTLIERS: u64 = 2;
const STREAM_NOISE: u64 = 3;

fn instance_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A synthetic recovery problem: truth, ensemble, and corrupted measurements.
#[derive(Debug, Clone)]
pub struct ProblemInstance {
    pub ensemble: SensingEnsemble,
    pub rank: usize,
    /// Generating factors `(X, Y)`; absent for measurement-only imports.
    pub truth: Option<FactorPair>,
    pub measurements: Vec<f64>,
    /// Sorted outlier indices `S`.
    pub outlier_set: Vec<usize>,
    pub outlier_fraction: f64,
    pub outlier_scale: f64,
    pub noise_scale: f64,
    pub ensemble_seed: u64,
    pub instance_seed: u64,
}

/// Draw an instance with Gaussian outliers `N(0, outlier_scale·‖M‖_F²)`.
pub fn generate_instance(params: &InstanceParams, seeds: Seeds) -> Result<ProblemInstance> {
    let scale = params.outlier_scale;
    generate_instance_with(params, seeds, |ctx, rng| {
        let z: f64 = rng.sample(StandardNormal);
        z * scale.sqrt() * ctx.frob_norm
    })
}

/// Draw an instance whose outlier values come from `outlier`.
///
/// The generator is called once per outlier index, in increasing index
/// order, with a dedicated RNG stream.
pub fn generate_instance_with<F>(params: &InstanceParams, seeds: Seeds, mut outlier: F) -> Result<ProblemInstance>
where
    F: FnMut(&OutlierContext, &mut ChaCha8Rng) -> f64,
{
    params.validate()?;
    let InstanceParams { n1, n2, rank, m, .. } = *params;

    let mut rng = instance_rng(seeds.instance, STREAM_FACTORS);
    let x = DenseMatrix::from_fn(n1, rank, |_, _| rng.sample(StandardNormal));
    let y = DenseMatrix::from_fn(n2, rank, |_, _| rng.sample(StandardNormal));
    let truth = GroundTruth::from_factors(&x, &y)?;

    let ensemble = SensingEnsemble::new(m, n1, n2, seeds.ensemble, params.storage)?;
    let mut measurements = apply_forward(&ensemble, &truth.m_matrix)?;

    let count = outlier_count(params.outlier_fraction, m);
    let mut outlier_set =
        rand::seq::index::sample(&mut instance_rng(seeds.instance, STREAM_SUPPORT), m, count).into_vec();
    outlier_set.sort_unstable();

    let mut rng = instance_rng(seeds.instance, STREAM_OUTLIERS);
    for &i in &outlier_set {
        let ctx = OutlierContext { index: i, clean_value: measurements[i], frob_norm: truth.frob_norm };
        let value = outlier(&ctx, &mut rng);
        if !value.is_finite() {
            return Err(invalid(format!("outlier generator produced a non-finite value at index {i}")));
        }
        measurements[i] = value;
    }

    if params.noise_scale > 0.0 {
        let amplitude = params.noise_scale * truth.sigma_r;
        let mut rng = instance_rng(seeds.instance, STREAM_NOISE);
        for y in measurements.iter_mut() {
            *y += amplitude * rng.random_range(-1.0..=1.0);
        }
    }

    Ok(ProblemInstance {
        ensemble,
        rank,
        truth: Some(FactorPair { u: x, v: y }),
        measurements,
        outlier_set,
        outlier_fraction: params.outlier_fraction,
        outlier_scale: params.outlier_scale,
        noise_scale: params.noise_scale,
        ensemble_seed: seeds.ensemble,
        instance_seed: seeds.instance,
    })
}

/// Version tag written into instance documents.
pub const INSTANCE_SCHEMA: &str = "median-tgd.instance.v1";

/// On-disk JSON form of a [`ProblemInstance`].
///
/// The sensing matrices are not stored; they are regenerated from
/// `ensemble_seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceDocument {
    pub schema: String,
    pub n1: usize,
    pub n2: usize,
    pub rank: usize,
    pub m: usize,
    pub outlier_fraction: f64,
    pub outlier_scale: f64,
    pub noise_scale: f64,
    pub ensemble_seed: u64,
    pub instance_seed: u64,
    pub outlier_set: Vec<usize>,
    pub measurements: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<FactorPair>,
}

impl ProblemInstance {
    pub fn m(&self) -> usize {
        self.ensemble.m()
    }

    pub fn n1(&self) -> usize {
        self.ensemble.n1()
    }

    pub fn n2(&self) -> usize {
        self.ensemble.n2()
    }

    /// Truth summary, if the generating factors are known.
    pub fn ground_truth(&self) -> Result<Option<GroundTruth>> {
        self.truth.as_ref().map(|t| GroundTruth::from_factors(&t.u, &t.v)).transpose()
    }

    pub fn to_document(&self) -> InstanceDocument {
        InstanceDocument {
            schema: INSTANCE_SCHEMA.to_string(),
            n1: self.n1(),
            n2: self.n2(),
            rank: self.rank,
            m: self.m(),
            outlier_fraction: self.outlier_fraction,
            outlier_scale: self.outlier_scale,
            noise_scale: self.noise_scale,
            ensemble_seed: self.ensemble_seed,
            instance_seed: self.instance_seed,
            outlier_set: self.outlier_set.clone(),
            measurements: self.measurements.clone(),
            truth: self.truth.clone(),
        }
    }

    pub fn from_document(doc: InstanceDocument, storage: StoragePolicy) -> Result<Self> {
        if doc.schema != INSTANCE_SCHEMA {
            return Err(invalid(format!("unsupported instance schema {:?}", doc.schema)));
        }
        if doc.measurements.len() != doc.m {
            return Err(invalid(format!("expected {} measurements, found {}", doc.m, doc.measurements.len())));
        }
        if doc.measurements.iter().any(|v| !v.is_finite()) {
            return Err(invalid("measurements must be finite"));
        }
        if doc.rank == 0 || doc.rank > doc.n1.min(doc.n2) {
            return Err(invalid(format!("rank {} out of range", doc.rank)));
        }
        if !doc.outlier_set.windows(2).all(|w| w[0] < w[1]) || doc.outlier_set.last().is_some_and(|&i| i >= doc.m) {
            return Err(invalid("outlier_set must be strictly increasing indices below m"));
        }
        if let Some(t) = &doc.truth {
            if t.u.shape() != (doc.n1, doc.rank) || t.v.shape() != (doc.n2, doc.rank) {
                return Err(invalid("truth factor shapes do not match n1, n2, rank"));
            }
        }
        let ensemble = SensingEnsemble::new(doc.m, doc.n1, doc.n2, doc.ensemble_seed, storage)?;
        Ok(Self {
            ensemble,
            rank: doc.rank,
            truth: doc.truth,
            measurements: doc.measurements,
            outlier_set: doc.outlier_set,
            outlier_fraction: doc.outlier_fraction,
            outlier_scale: doc.outlier_scale,
            noise_scale: doc.noise_scale,
            ensemble_seed: doc.ensemble_seed,
            instance_seed: doc.instance_seed,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(text: &str, storage: StoragePolicy) -> Result<Self> {
        let doc: InstanceDocument = serde_json::from_str(text)?;
        Self::from_document(doc, storage)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeds(e: u64, i: u64) -> Seeds {
        Seeds { ensemble: e, instance: i }
    }

    #[test]
    fn forward_of_zero_is_zero() {
        let e = SensingEnsemble::new(5, 3, 2, 1, StoragePolicy::default()).unwrap();
        assert_eq!(apply_forward(&e, &DenseMatrix::zeros(3, 2)).unwrap(), vec![0.0; 5]);
    }

    #[test]
    fn forward_picks_single_entry() {
        let e = SensingEnsemble::new(1, 3, 2, 4, StoragePolicy::default()).unwrap();
        let mut m = DenseMatrix::zeros(3, 2);
        m.set(0, 0, 1.0);
        assert_eq!(apply_forward(&e, &m).unwrap(), vec![e.matrix(0).get(0, 0)]);
    }

    #[test]
    fn forward_matches_double_loop() {
        let e = SensingEnsemble::new(4, 3, 2, 17, StoragePolicy::default()).unwrap();
        let m = DenseMatrix::new(3, 2, vec![0.3, -1.2, 2.5, 0.7, -0.4, 1.1]).unwrap();
        let out = apply_forward(&e, &m).unwrap();
        for (i, &got) in out.iter().enumerate() {
            let a = e.matrix(i);
            let mut expected = 0.0;
            for k in 0..3 {
                for t in 0..2 {
                    expected += a.get(k, t) * m.get(k, t);
                }
            }
            assert!((got - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_rejects_wrong_shape() {
        let e = SensingEnsemble::new(2, 3, 2, 0, StoragePolicy::default()).unwrap();
        assert!(apply_forward(&e, &DenseMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn adjoint_examples() {
        let e = SensingEnsemble::new(3, 3, 2, 8, StoragePolicy::default()).unwrap();
        let zero = apply_adjoint_weighted(&e, &[0.0; 3], &[true; 3]).unwrap();
        assert_eq!(zero.frobenius_norm(), 0.0);

        let single = SensingEnsemble::new(1, 3, 2, 8, StoragePolicy::default()).unwrap();
        assert_eq!(apply_adjoint_weighted(&single, &[1.0], &[true]).unwrap(), single.matrix(0));

        let w = [0.5, -2.0, 1.5];
        let mask = [true, false, true];
        let got = apply_adjoint_weighted(&e, &w, &mask).unwrap();
        let mut expected = DenseMatrix::zeros(3, 2);
        for i in 0..3 {
            if mask[i] {
                let a = e.matrix(i);
                for k in 0..3 {
                    for t in 0..2 {
                        expected.set(k, t, expected.get(k, t) + w[i] * a.get(k, t));
                    }
                }
            }
        }
        assert!(got.sub(&expected).frobenius_norm() < 1e-12);
        assert!(apply_adjoint_weighted(&e, &w[..2], &mask[..2]).is_err());
    }

    #[test]
    fn storage_modes_agree_bitwise() {
        let a = SensingEnsemble::new(600, 4, 3, 21, StoragePolicy::Fixed(Storage::Materialized)).unwrap();
        let b = SensingEnsemble::new(600, 4, 3, 21, StoragePolicy::Fixed(Storage::Regenerate)).unwrap();
        for i in [0, 1, 257, 599] {
            assert_eq!(a.matrix(i), b.matrix(i));
        }
        let m = DenseMatrix::from_fn(4, 3, |i, j| (i as f64) - 0.5 * j as f64);
        assert_eq!(apply_forward(&a, &m).unwrap(), apply_forward(&b, &m).unwrap());
        let w: Vec<f64> = (0..600).map(|i| (i as f64).sin()).collect();
        let mask = vec![true; 600];
        assert_eq!(apply_adjoint_weighted(&a, &w, &mask).unwrap(), apply_adjoint_weighted(&b, &w, &mask).unwrap());
    }

    #[test]
    fn auto_policy_respects_budget() {
        let small = SensingEnsemble::new(10, 4, 4, 0, StoragePolicy::Auto { budget_bytes: 10 * 16 * 8 }).unwrap();
        assert_eq!(small.storage(), Storage::Materialized);
        let big = SensingEnsemble::new(10, 4, 4, 0, StoragePolicy::Auto { budget_bytes: 10 * 16 * 8 - 1 }).unwrap();
        assert_eq!(big.storage(), Storage::Regenerate);
    }

    #[test]
    fn clean_instance_is_exact() {
        let p = InstanceParams::new(6, 5, 2, 40);
        let inst = generate_instance(&p, seeds(1, 2)).unwrap();
        assert!(inst.outlier_set.is_empty());
        let gt = inst.ground_truth().unwrap().unwrap();
        assert_eq!(inst.measurements, apply_forward(&inst.ensemble, &gt.m_matrix).unwrap());
    }

    #[test]
    fn outlier_count_uses_floor() {
        let p = InstanceParams::new(6, 5, 2, 100).with_outliers(0.05);
        let inst = generate_instance(&p, seeds(1, 2)).unwrap();
        assert_eq!(inst.outlier_set.len(), 5);
        assert_eq!(outlier_count(0.29, 100), 29);
        assert_eq!(outlier_count(0.059, 100), 5);
    }

    #[test]
    fn instances_are_deterministic() {
        let p = InstanceParams::new(6, 5, 2, 100).with_outliers(0.1).with_noise(0.05);
        let a = generate_instance(&p, seeds(3, 4)).unwrap();
        let b = generate_instance(&p, seeds(3, 4)).unwrap();
        assert_eq!(a.measurements, b.measurements);
        assert_eq!(a.outlier_set, b.outlier_set);
        assert_eq!(a.truth, b.truth);
        let c = generate_instance(&p, seeds(3, 5)).unwrap();
        assert_ne!(a.measurements, c.measurements);
    }

    #[test]
    fn inliers_untouched_and_noise_bounded() {
        let p = InstanceParams::new(6, 5, 2, 200).with_outliers(0.1).with_noise(0.05);
        let inst = generate_instance(&p, seeds(9, 9)).unwrap();
        let gt = inst.ground_truth().unwrap().unwrap();
        let clean = apply_forward(&inst.ensemble, &gt.m_matrix).unwrap();
        let bound = 0.05 * gt.sigma_r;
        for (i, (y, c)) in inst.measurements.iter().zip(&clean).enumerate() {
            if inst.outlier_set.binary_search(&i).is_err() {
                assert!((y - c).abs() <= bound + 1e-12);
            }
        }
    }

    #[test]
    fn custom_outliers() {
        let p = InstanceParams::new(4, 4, 1, 50).with_outliers(0.2);
        let inst = generate_instance_with(&p, seeds(0, 0), |_, _| -1e9).unwrap();
        for &i in &inst.outlier_set {
            assert_eq!(inst.measurements[i], -1e9);
        }
        assert!(generate_instance_with(&p, seeds(0, 0), |_, _| f64::NAN).is_err());
    }

    #[test]
    fn invalid_params() {
        assert!(generate_instance(&InstanceParams::new(4, 4, 5, 10), seeds(0, 0)).is_err());
        assert!(generate_instance(&InstanceParams::new(4, 4, 1, 10).with_outliers(1.0), seeds(0, 0)).is_err());
        assert!(generate_instance(&InstanceParams::new(4, 4, 1, 0), seeds(0, 0)).is_err());
    }

    #[test]
    fn ground_truth_summary() {
        let x = DenseMatrix::new(2, 1, vec![3.0, 4.0]).unwrap();
        let y = DenseMatrix::new(2, 1, vec![1.0, 0.0]).unwrap();
        let gt = GroundTruth::from_factors(&x, &y).unwrap();
        assert!((gt.frob_norm - 5.0).abs() < 1e-12);
        assert!((gt.sigma_r - 5.0).abs() < 1e-12);
        assert!(gt.avg_condition_number <= gt.condition_number + 1e-12);
        let b = &gt.balanced;
        assert!(b.u.t_matmul(&b.u).sub(&b.v.t_matmul(&b.v)).frobenius_norm() < 1e-12);
        assert!(b.u.matmul_t(&b.v).sub(&gt.m_matrix).frobenius_norm() < 1e-12);
    }

    #[test]
    fn json_round_trip() {
        let p = InstanceParams::new(5, 4, 2, 30).with_outliers(0.1).with_noise(0.05);
        let inst = generate_instance(&p, seeds(12, 34)).unwrap();
        let text = inst.to_json().unwrap();
        let back = ProblemInstance::from_json(&text, StoragePolicy::Fixed(Storage::Regenerate)).unwrap();
        assert_eq!(back.to_document(), inst.to_document());
        assert_eq!(back.ensemble.matrix(7), inst.ensemble.matrix(7));

        let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
        doc["surprise"] = serde_json::json!(1);
        assert!(ProblemInstance::from_json(&doc.to_string(), StoragePolicy::default()).is_err());
    }
}
