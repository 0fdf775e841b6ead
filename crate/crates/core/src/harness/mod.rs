//! Experiment runners behind the `median-tgd` CLI.
//!
//! Every trial is addressed by `(master_seed, m, r, s, trial)`, so cells can
//! run in any order and on any number of threads; results are always
//! emitted sorted by cell coordinates.
//!
//! CSV outputs start with `#` metadata lines (schema tag, then the resolved
//! spec as indented TOML) followed by a header row. Schemas:
//!
//! | file | columns |
//! |------|---------|
//! | `phase_grid.csv` (v1) | `m,r,s,trials,successes,success_rate,mean_error,theoretical_limit_r` |
//! | `noise_stability.csv` (v1) | `m,s,noise_scale,algorithm,trials,mean_error` |
//! | `convergence.csv` (v1) | `algorithm,s,iter,error` |

mod spec;

pub use spec::{
    parse_spec, parse_spec_str, ExperimentKind, ExperimentSpec, SpecOverrides, DEFAULT_HARNESS_STOP_TOL,
    DEFAULT_THRESHOLD, DEFAULT_TRIALS, DESK_MAX_DIMS,
};

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::diagnostics::{
    median_concentration_check, rc_probe, rip_check, ConcentrationReport, RcProbeReport, RipReport,
};
use crate::error::{io_error, Error, Result};
use crate::linalg::Quantile;
use crate::recovery::{run_recovery, Algorithm, RecoveryTrace};
use crate::seeding::derive_seed;
use crate::sensing::{generate_instance, InstanceParams, ProblemInstance, Seeds};

pub const PHASE_GRID_SCHEMA: &str = "median-tgd.phase-grid.v1";
pub const NOISE_STABILITY_SCHEMA: &str = "median-tgd.noise-stability.v1";
pub const CONVERGENCE_SCHEMA: &str = "median-tgd.convergence.v1";
pub const DIAGNOSE_SCHEMA: &str = "median-tgd.diagnose.v1";

pub const PHASE_GRID_HEADER: &str = "m,r,s,trials,successes,success_rate,mean_error,theoretical_limit_r";
pub const NOISE_STABILITY_HEADER: &str = "m,s,noise_scale,algorithm,trials,mean_error";
pub const CONVERGENCE_HEADER: &str = "algorithm,s,iter,error";

/// Ensemble and instance seeds of one trial.
pub fn trial_seeds(master: u64, m: usize, r: usize, s: f64, trial: usize) -> Seeds {
    let cell = derive_seed(master, &[m as u64, r as u64, s.to_bits(), trial as u64]);
    Seeds { ensemble: derive_seed(cell, &[0]), instance: derive_seed(cell, &[1]) }
}

/// `(1 − s)·m / (n₁ + n₂)`, the largest rank the degrees of freedom allow.
pub fn theoretical_limit_r(m: usize, s: f64, n1: usize, n2: usize) -> f64 {
    (1.0 - s) * m as f64 / (n1 + n2) as f64
}

fn instance_for(spec: &ExperimentSpec, m: usize, r: usize, s: f64, trial: usize) -> Result<ProblemInstance> {
    let params = InstanceParams {
        outlier_scale: spec.outlier_scale,
        ..InstanceParams::new(spec.n1, spec.n2, r, m).with_outliers(s).with_noise(spec.noise_scale)
    };
    generate_instance(&params, trial_seeds(spec.master_seed, m, r, s, trial))
}

/// The instance `recover` and `gen-instance` use: first entry of each grid,
/// trial 0.
pub fn single_instance(spec: &ExperimentSpec) -> Result<ProblemInstance> {
    instance_for(spec, spec.m_grid[0], spec.r_grid[0], spec.s_grid[0], 0)
}

fn final_error(instance: &ProblemInstance, spec: &ExperimentSpec, algorithm: Algorithm) -> Result<f64> {
    match run_recovery(instance, &spec.recovery_config(instance.rank, algorithm)) {
        Ok(trace) => Ok(trace.final_error().unwrap_or(f64::INFINITY)),
        Err(Error::InitFailure(_)) => Ok(f64::INFINITY),
        Err(e) => Err(e),
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn sort_grid<T: Copy>(spec: &ExperimentSpec, f: impl Fn(usize, usize, f64) -> T) -> Vec<T> {
    let mut ms = spec.m_grid.clone();
    let mut rs = spec.r_grid.clone();
    let mut ss = spec.s_grid.clone();
    ms.sort_unstable();
    rs.sort_unstable();
    ss.sort_by(f64::total_cmp);
    let mut out = Vec::with_capacity(ms.len() * rs.len() * ss.len());
    for &m in &ms {
        for &r in &rs {
            for &s in &ss {
                out.push(f(m, r, s));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseCellResult {
    pub m: usize,
    pub r: usize,
    pub s: f64,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_error: f64,
    pub theoretical_limit_r: f64,
}

/// Success rates over every `(m, r, s)` cell of the spec.
pub fn run_phase_grid(spec: &ExperimentSpec) -> Result<Vec<PhaseCellResult>> {
    spec.validate()?;
    let cells = sort_grid(spec, |m, r, s| (m, r, s));
    let jobs: Vec<(usize, usize)> = (0..cells.len()).flat_map(|c| (0..spec.trials).map(move |t| (c, t))).collect();
    let errors = jobs
        .par_iter()
        .map(|&(c, t)| {
            let (m, r, s) = cells[c];
            final_error(&instance_for(spec, m, r, s, t)?, spec, Algorithm::MedianTgd)
        })
        .collect::<Result<Vec<f64>>>()?;

    Ok(cells
        .iter()
        .zip(errors.chunks(spec.trials))
        .map(|(&(m, r, s), errs)| {
            let successes = errs.iter().filter(|&&e| e < spec.threshold).count();
            PhaseCellResult {
                m,
                r,
                s,
                trials: spec.trials,
                successes,
                success_rate: successes as f64 / spec.trials as f64,
                mean_error: mean(errs),
                theoretical_limit_r: theoretical_limit_r(m, s, spec.n1, spec.n2),
            }
        })
        .collect())
}

fn write_metadata(out: &mut impl Write, schema: &str, spec: &ExperimentSpec) -> std::io::Result<()> {
    writeln!(out, "# schema: {schema}")?;
    writeln!(out, "# crate: median-tgd {}", env!("CARGO_PKG_VERSION"))?;
    writeln!(out, "# spec:")?;
    for line in spec.to_toml().lines() {
        writeln!(out, "#   {line}")?;
    }
    Ok(())
}

pub fn write_phase_grid_csv(
    spec: &ExperimentSpec,
    cells: &[PhaseCellResult],
    mut out: impl Write,
) -> std::io::Result<()> {
    write_metadata(&mut out, PHASE_GRID_SCHEMA, spec)?;
    writeln!(out, "{PHASE_GRID_HEADER}")?;
    for c in cells {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            c.m, c.r, c.s, c.trials, c.successes, c.success_rate, c.mean_error, c.theoretical_limit_r
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoisePoint {
    pub m: usize,
    pub s: f64,
    pub noise_scale: f64,
    pub algorithm: Algorithm,
    pub trials: usize,
    pub mean_error: f64,
}

/// Mean final error against `m` for both algorithms on shared instances.
/// Uses the first rank of the grid.
pub fn run_noise_stability(spec: &ExperimentSpec) -> Result<Vec<NoisePoint>> {
    spec.validate()?;
    let r = spec.r_grid[0];
    let mut cells = sort_grid(spec, |m, _, s| (m, s));
    cells.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    cells.dedup();
    let algorithms = [Algorithm::MedianTgd, Algorithm::VanillaGd];
    let jobs: Vec<(usize, usize)> = (0..cells.len()).flat_map(|c| (0..spec.trials).map(move |t| (c, t))).collect();
    let errors = jobs
        .par_iter()
        .map(|&(c, t)| {
            let (m, s) = cells[c];
            let instance = instance_for(spec, m, r, s, t)?;
            algorithms.iter().map(|&a| final_error(&instance, spec, a)).collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;

    let mut points = Vec::new();
    for (c, &(m, s)) in cells.iter().enumerate() {
        let rows = &errors[c * spec.trials..(c + 1) * spec.trials];
        for (k, &algorithm) in algorithms.iter().enumerate() {
            let errs: Vec<f64> = rows.iter().map(|row| row[k]).collect();
            points.push(NoisePoint {
                m,
                s,
                noise_scale: spec.noise_scale,
                algorithm,
                trials: spec.trials,
                mean_error: mean(&errs),
            });
        }
    }
    Ok(points)
}

pub fn write_noise_stability_csv(
    spec: &ExperimentSpec,
    points: &[NoisePoint],
    mut out: impl Write,
) -> std::io::Result<()> {
    write_metadata(&mut out, NOISE_STABILITY_SCHEMA, spec)?;
    writeln!(out, "{NOISE_STABILITY_HEADER}")?;
    for p in points {
        writeln!(out, "{},{},{},{},{},{}", p.m, p.s, p.noise_scale, p.algorithm.name(), p.trials, p.mean_error)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ConvergenceSeries {
    pub algorithm: Algorithm,
    pub s: f64,
    pub trace: RecoveryTrace,
}

/// Error traces of both algorithms at every outlier fraction of the grid,
/// on the trial-0 instance at the first `m` and rank of the grid.
pub fn run_convergence_compare(spec: &ExperimentSpec) -> Result<Vec<ConvergenceSeries>> {
    spec.validate()?;
    let (m, r) = (spec.m_grid[0], spec.r_grid[0]);
    let mut ss = spec.s_grid.clone();
    ss.sort_by(f64::total_cmp);
    let jobs: Vec<(Algorithm, f64)> = [Algorithm::MedianTgd, Algorithm::VanillaGd]
        .into_iter()
        .flat_map(|a| ss.iter().map(move |&s| (a, s)))
        .collect();
    jobs.par_iter()
        .map(|&(algorithm, s)| {
            let instance = instance_for(spec, m, r, s, 0)?;
            let trace = run_recovery(&instance, &spec.recovery_config(r, algorithm))?;
            Ok(ConvergenceSeries { algorithm, s, trace })
        })
        .collect()
}

pub fn write_convergence_csv(
    spec: &ExperimentSpec,
    series: &[ConvergenceSeries],
    mut out: impl Write,
) -> std::io::Result<()> {
    write_metadata(&mut out, CONVERGENCE_SCHEMA, spec)?;
    writeln!(out, "{CONVERGENCE_HEADER}")?;
    for c in series {
        for rec in &c.trace.records {
            let err = rec.normalized_error.unwrap_or(f64::NAN);
            writeln!(out, "{},{},{},{}", c.algorithm.name(), c.s, rec.iter, err)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct RcEntry {
    pub m: usize,
    pub r: usize,
    pub s: f64,
    pub report: RcProbeReport,
}

/// Regularity probe constants: `α = 20`, `β = 1000`, radius `σ_r(Z)/24`.
pub const RC_ALPHA: f64 = 20.0;
pub const RC_BETA: f64 = 1000.0;
pub const RC_EPS_FRACTION: f64 = 1.0 / 24.0;

#[derive(Debug, Clone, Serialize)]
pub struct DiagnoseReport {
    pub schema: &'static str,
    pub spec: ExperimentSpec,
    pub concentration: Vec<ConcentrationReport>,
    pub rip: Vec<RipReport>,
    pub regularity: Vec<RcEntry>,
}

/// Concentration at `τ ∈ {0.49, 0.5, 0.51}` and isometry for every
/// `(m, r)`, and a regularity probe with `trials` samples for every cell.
pub fn run_diagnose(spec: &ExperimentSpec) -> Result<DiagnoseReport> {
    spec.validate()?;
    let cells = sort_grid(spec, |m, r, s| (m, r, s));
    let mut concentration = Vec::new();
    let mut rip = Vec::new();
    let mut mr: Vec<(usize, usize)> = cells.iter().map(|&(m, r, _)| (m, r)).collect();
    mr.dedup();
    for &(m, r) in &mr {
        let seed = derive_seed(spec.master_seed, &[m as u64, r as u64]);
        for tau in [0.49, 0.5, 0.51] {
            let q = Quantile::new(tau)?;
            concentration.push(median_concentration_check(spec.n1, spec.n2, r, m, spec.trials, q, seed)?);
        }
        rip.push(rip_check(spec.n1, spec.n2, r, m, spec.trials, seed)?);
    }
    let mut regularity = Vec::new();
    for &(m, r, s) in &cells {
        let instance = instance_for(spec, m, r, s, 0)?;
        let config = spec.recovery_config(r, Algorithm::MedianTgd);
        let seed = derive_seed(spec.master_seed, &[m as u64, r as u64, s.to_bits(), u64::MAX]);
        let report = rc_probe(&instance, &config, RC_ALPHA, RC_BETA, RC_EPS_FRACTION, spec.trials, seed)?;
        regularity.push(RcEntry { m, r, s, report });
    }
    Ok(DiagnoseReport { schema: DIAGNOSE_SCHEMA, spec: spec.clone(), concentration, rip, regularity })
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(io_error(path))?;
    Ok(std::io::BufWriter::new(file))
}

fn write_file(
    path: &Path,
    f: impl FnOnce(&mut std::io::BufWriter<std::fs::File>) -> std::io::Result<()>,
) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w).and_then(|_| w.flush()).map_err(io_error(path))
}

/// Run the experiment named by `spec.kind` and write its output under
/// `spec.out`. Returns the written file.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<PathBuf> {
    spec.validate()?;
    std::fs::create_dir_all(&spec.out).map_err(io_error(&spec.out))?;
    match spec.kind {
        ExperimentKind::PhaseGridMr | ExperimentKind::PhaseGridSr => {
            let cells = run_phase_grid(spec)?;
            let path = spec.out.join("phase_grid.csv");
            write_file(&path, |w| write_phase_grid_csv(spec, &cells, w))?;
            Ok(path)
        }
        ExperimentKind::NoiseStability => {
            let points = run_noise_stability(spec)?;
            let path = spec.out.join("noise_stability.csv");
            write_file(&path, |w| write_noise_stability_csv(spec, &points, w))?;
            Ok(path)
        }
        ExperimentKind::ConvergenceCompare => {
            let series = run_convergence_compare(spec)?;
            let path = spec.out.join("convergence.csv");
            write_file(&path, |w| write_convergence_csv(spec, &series, w))?;
            Ok(path)
        }
        ExperimentKind::Diagnose => {
            let report = run_diagnose(spec)?;
            let path = spec.out.join("diagnose.json");
            write_file(&path, |w| {
                serde_json::to_writer_pretty(&mut *w, &report)?;
                writeln!(w)
            })?;
            Ok(path)
        }
    }
}

/// Lines of a harness CSV without its `#` metadata header.
pub fn csv_body(text: &str) -> String {
    text.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect()
}
