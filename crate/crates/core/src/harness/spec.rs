//! Experiment specifications: a flat TOML document, defaults per kind,
//! exhaustive validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{io_error, Error, Result};
use crate::recovery::{
    default_lambda, Algorithm, RecoveryConfig, DEFAULT_ALPHA_H, DEFAULT_ALPHA_Y, DEFAULT_MAX_ITERS, DEFAULT_STEP_MU,
};
use crate::sensing::{DEFAULT_OUTLIER_SCALE, STABILITY_NOISE_SCALE};

/// Largest dimensions accepted without `full = true`.
pub const DESK_MAX_DIMS: (usize, usize) = (48, 36);

pub const DEFAULT_TRIALS: usize = 10;
pub const DEFAULT_THRESHOLD: f64 = 1e-6;

/// Relative iterate change below which harness runs stop early.
pub const DEFAULT_HARNESS_STOP_TOL: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    /// Success rate over an `(m, r)` grid.
    PhaseGridMr,
    /// Success rate over an `(s, r)` grid.
    PhaseGridSr,
    /// Mean error against `m` under outliers plus bounded noise.
    NoiseStability,
    /// Per-iteration error traces of both algorithms.
    ConvergenceCompare,
    /// Concentration, isometry and regularity diagnostics.
    Diagnose,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::PhaseGridMr => "phase-grid-mr",
            ExperimentKind::PhaseGridSr => "phase-grid-sr",
            ExperimentKind::NoiseStability => "noise-stability",
            ExperimentKind::ConvergenceCompare => "convergence-compare",
            ExperimentKind::Diagnose => "diagnose",
        }
    }

    fn default_grids(self) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
        match self {
            ExperimentKind::PhaseGridMr => (vec![300, 600, 900, 1200, 1500, 2000], vec![1, 2, 3, 4, 5], vec![0.0]),
            ExperimentKind::PhaseGridSr => (vec![1200], vec![1, 2, 3, 4, 5], vec![0.0, 0.05, 0.1, 0.15, 0.2]),
            ExperimentKind::NoiseStability => (vec![600, 900, 1200, 1500, 1800], vec![2], vec![0.05]),
            ExperimentKind::ConvergenceCompare => (vec![1200], vec![3], vec![0.0, 0.01, 0.1]),
            ExperimentKind::Diagnose => (vec![2000], vec![2], vec![0.0, 0.05]),
        }
    }

    fn default_noise_scale(self) -> f64 {
        match self {
            ExperimentKind::NoiseStability => STABILITY_NOISE_SCALE,
            _ => 0.0,
        }
    }
}

/// A fully resolved experiment. Every field is present when echoed, so
/// `parse(echo(spec)) == spec`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub n1: usize,
    pub n2: usize,
    pub m_grid: Vec<usize>,
    pub r_grid: Vec<usize>,
    pub s_grid: Vec<f64>,
    pub trials: usize,
    /// A trial succeeds when its final normalized error is strictly below this.
    pub threshold: f64,
    pub master_seed: u64,
    pub outlier_scale: f64,
    pub noise_scale: f64,
    pub alpha_y: f64,
    pub alpha_h: f64,
    pub step_mu: f64,
    pub lambda: f64,
    pub max_iters: usize,
    pub split_init: bool,
    pub stop_tol: f64,
    /// Output directory.
    pub out: PathBuf,
    /// Allow dimensions beyond desk scale.
    pub full: bool,
}

/// Partially specified experiment, as read from a config file and flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecOverrides {
    pub kind: Option<ExperimentKind>,
    pub n1: Option<usize>,
    pub n2: Option<usize>,
    pub m_grid: Option<Vec<usize>>,
    pub r_grid: Option<Vec<usize>>,
    pub s_grid: Option<Vec<f64>>,
    pub trials: Option<usize>,
    pub threshold: Option<f64>,
    pub master_seed: Option<u64>,
    pub outlier_scale: Option<f64>,
    pub noise_scale: Option<f64>,
    pub alpha_y: Option<f64>,
    pub alpha_h: Option<f64>,
    pub step_mu: Option<f64>,
    pub lambda: Option<f64>,
    pub max_iters: Option<usize>,
    pub split_init: Option<bool>,
    pub stop_tol: Option<f64>,
    pub out: Option<PathBuf>,
    pub full: Option<bool>,
}

macro_rules! overlay {
    ($base:expr, $top:expr, $($field:ident),*) => {
        $( if $top.$field.is_some() { $base.$field = $top.$field; } )*
    };
}

impl SpecOverrides {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse { origin: origin.to_string(), message: e.to_string() })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_error(path))?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    /// Fields set in `top` replace those in `self`.
    pub fn merge(mut self, top: SpecOverrides) -> Self {
        overlay!(
            self,
            top,
            kind,
            n1,
            n2,
            m_grid,
            r_grid,
            s_grid,
            trials,
            threshold,
            master_seed,
            outlier_scale,
            noise_scale,
            alpha_y,
            alpha_h,
            step_mu,
            lambda,
            max_iters,
            split_init,
            stop_tol,
            out,
            full
        );
        self
    }

    /// Apply defaults and validate. All problems are reported together.
    pub fn resolve(self) -> Result<ExperimentSpec> {
        let mut missing = Vec::new();
        if self.kind.is_none() {
            missing.push("missing required field `kind`".to_string());
        }
        if self.n1.is_none() {
            missing.push("missing required field `n1`".to_string());
        }
        if self.n2.is_none() {
            missing.push("missing required field `n2`".to_string());
        }
        let (Some(kind), Some(n1), Some(n2)) = (self.kind, self.n1, self.n2) else {
            return Err(Error::Validation(missing));
        };
        let (m_grid, r_grid, s_grid) = kind.default_grids();
        let spec = ExperimentSpec {
            kind,
            n1,
            n2,
            m_grid: self.m_grid.unwrap_or(m_grid),
            r_grid: self.r_grid.unwrap_or(r_grid),
            s_grid: self.s_grid.unwrap_or(s_grid),
            trials: self.trials.unwrap_or(DEFAULT_TRIALS),
            threshold: self.threshold.unwrap_or(DEFAULT_THRESHOLD),
            master_seed: self.master_seed.unwrap_or(0),
            outlier_scale: self.outlier_scale.unwrap_or(DEFAULT_OUTLIER_SCALE),
            noise_scale: self.noise_scale.unwrap_or(kind.default_noise_scale()),
            alpha_y: self.alpha_y.unwrap_or(DEFAULT_ALPHA_Y),
            alpha_h: self.alpha_h.unwrap_or(DEFAULT_ALPHA_H),
            step_mu: self.step_mu.unwrap_or(DEFAULT_STEP_MU),
            lambda: self.lambda.unwrap_or_else(default_lambda),
            max_iters: self.max_iters.unwrap_or(DEFAULT_MAX_ITERS),
            split_init: self.split_init.unwrap_or(false),
            stop_tol: self.stop_tol.unwrap_or(DEFAULT_HARNESS_STOP_TOL),
            out: self.out.unwrap_or_else(|| PathBuf::from("out")),
            full: self.full.unwrap_or(false),
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn has_duplicates<T: PartialOrd + Copy>(values: &[T]) -> bool {
    values.iter().enumerate().any(|(i, a)| values[..i].iter().any(|b| b == a))
}

impl ExperimentSpec {
    /// Every constraint violation, or `Ok`.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                problems.push(msg);
            }
        };
        check(self.n1 > 0 && self.n2 > 0, format!("n1, n2: dimensions must be positive, got {}x{}", self.n1, self.n2));
        check(
            self.full || (self.n1 <= DESK_MAX_DIMS.0 && self.n2 <= DESK_MAX_DIMS.1),
            format!(
                "n1, n2: {}x{} exceeds desk scale {}x{}; set full = true (or pass --full)",
                self.n1, self.n2, DESK_MAX_DIMS.0, DESK_MAX_DIMS.1
            ),
        );
        check(!self.m_grid.is_empty(), "m_grid: must be nonempty".into());
        check(!self.r_grid.is_empty(), "r_grid: must be nonempty".into());
        check(!self.s_grid.is_empty(), "s_grid: must be nonempty".into());
        check(self.m_grid.iter().all(|&m| m > 0), "m_grid: entries must be positive".into());
        let max_rank = self.n1.min(self.n2);
        check(
            self.r_grid.iter().all(|&r| r >= 1 && r <= max_rank),
            format!("r_grid: entries must lie in 1..={max_rank}"),
        );
        check(
            self.s_grid.iter().all(|s| (0.0..1.0).contains(s)),
            "s_grid: outlier fractions must lie in [0, 1)".into(),
        );
        check(!has_duplicates(&self.m_grid), "m_grid: duplicate entries".into());
        check(!has_duplicates(&self.r_grid), "r_grid: duplicate entries".into());
        check(!has_duplicates(&self.s_grid), "s_grid: duplicate entries".into());
        check(self.trials >= 1, "trials: must be at least 1".into());
        check(self.threshold > 0.0, format!("threshold: must be > 0, got {}", self.threshold));
        check(
            self.outlier_scale >= 0.0 && self.outlier_scale.is_finite(),
            format!("outlier_scale: must be finite and >= 0, got {}", self.outlier_scale),
        );
        check(
            self.noise_scale >= 0.0 && self.noise_scale.is_finite(),
            format!("noise_scale: must be finite and >= 0, got {}", self.noise_scale),
        );
        check(self.alpha_y > 0.0, format!("alpha_y: must be > 0, got {}", self.alpha_y));
        check(
            self.alpha_h > 1.0 && self.alpha_h.is_finite(),
            format!("alpha_h: must be finite and > 1, got {}", self.alpha_h),
        );
        check(
            self.step_mu > 0.0 && self.step_mu.is_finite(),
            format!("step_mu: must be finite and > 0, got {}", self.step_mu),
        );
        check(
            self.lambda >= 0.0 && self.lambda.is_finite(),
            format!("lambda: must be finite and >= 0, got {}", self.lambda),
        );
        check(self.stop_tol >= 0.0, format!("stop_tol: must be >= 0, got {}", self.stop_tol));
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    /// Recovery settings for rank `rank`.
    pub fn recovery_config(&self, rank: usize, algorithm: Algorithm) -> RecoveryConfig {
        RecoveryConfig {
            rank,
            alpha_y: self.alpha_y,
            alpha_h: self.alpha_h,
            step_mu: self.step_mu,
            lambda: self.lambda,
            max_iters: self.max_iters,
            split_init: self.split_init,
            stop_tol: self.stop_tol,
            algorithm,
        }
    }

    /// The resolved spec as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment spec serializes")
    }
}

/// Parse and resolve a spec from TOML text.
pub fn parse_spec_str(text: &str, origin: &str) -> Result<ExperimentSpec> {
    SpecOverrides::from_toml_str(text, origin)?.resolve()
}

/// Parse and resolve a spec file.
pub fn parse_spec(path: &Path) -> Result<ExperimentSpec> {
    SpecOverrides::from_file(path)?.resolve()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_spec_gets_defaults() {
        let spec = parse_spec_str("kind = \"phase-grid-mr\"\nn1 = 40\nn2 = 30\n", "test").unwrap();
        assert_eq!(spec.alpha_y, 12.0);
        assert_eq!(spec.alpha_h, 6.0);
        assert_eq!(spec.step_mu, 0.4);
        assert_eq!(spec.max_iters, 10_000);
        assert_eq!(spec.lambda, default_lambda());
        assert_eq!(spec.threshold, 1e-6);
        assert_eq!(spec.trials, 10);
        assert!(!spec.split_init);
    }

    #[test]
    fn echo_round_trips() {
        let text = "kind = \"noise-stability\"\nn1 = 20\nn2 = 12\ns_grid = [0.05, 0.1]\nlambda = 0.1\nalpha_y = inf\n";
        let spec = parse_spec_str(text, "test").unwrap();
        let echoed = spec.to_toml();
        assert_eq!(parse_spec_str(&echoed, "echo").unwrap(), spec);
    }

    #[test]
    fn nonpositive_threshold_names_field() {
        let err = parse_spec_str("kind = \"diagnose\"\nn1 = 10\nn2 = 10\nthreshold = 0.0\n", "t").unwrap_err();
        assert!(err.to_string().contains("threshold"), "{err}");
    }

    #[test]
    fn violations_listed_together() {
        let text =
            "kind = \"phase-grid-sr\"\nn1 = 10\nn2 = 10\ntrials = 0\nm_grid = []\nr_grid = [11]\nalpha_h = 0.5\n";
        match parse_spec_str(text, "t").unwrap_err() {
            Error::Validation(list) => {
                let joined = list.join("\n");
                for key in ["trials", "m_grid", "r_grid", "alpha_h"] {
                    assert!(joined.contains(key), "{key} missing in {joined}");
                }
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn missing_required_fields() {
        match parse_spec_str("trials = 3\n", "t").unwrap_err() {
            Error::Validation(list) => assert_eq!(list.len(), 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unknown_key_rejected_with_context() {
        let err = parse_spec_str("kind = \"diagnose\"\nn1 = 10\nn2 = 10\nalpha = 3\n", "cfg.toml").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("cfg.toml") && msg.contains("alpha"), "{msg}");
        assert!(msg.contains("line 4") || msg.contains("4 |"), "{msg}");
    }

    #[test]
    fn large_scale_needs_full() {
        let base = "kind = \"phase-grid-mr\"\nn1 = 150\nn2 = 120\n";
        assert!(parse_spec_str(base, "t").unwrap_err().to_string().contains("full"));
        assert!(parse_spec_str(&format!("{base}full = true\n"), "t").is_ok());
    }

    #[test]
    fn overlay_prefers_top() {
        let base = SpecOverrides { n1: Some(10), trials: Some(3), ..Default::default() };
        let top = SpecOverrides { trials: Some(5), ..Default::default() };
        let merged = base.merge(top);
        assert_eq!(merged.n1, Some(10));
        assert_eq!(merged.trials, Some(5));
    }
}
