use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use median_tgd::harness::{self, ExperimentKind, ExperimentSpec, SpecOverrides};
use median_tgd::recovery::{run_recovery, Algorithm, FactorPair};
use median_tgd::sensing::{ProblemInstance, Seeds, StoragePolicy};
use median_tgd::{Error, Result};

/// Robust low-rank matrix recovery by median-truncated gradient descent.
#[derive(Parser)]
#[command(name = "median-tgd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Recover one instance; writes trace.csv and factors.json.
    Recover {
        /// Instance JSON to recover instead of generating one.
        #[arg(long)]
        instance: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "median-tgd")]
        algorithm: AlgorithmArg,
        #[command(flatten)]
        common: Common,
    },
    /// Success-rate grid over (m, r) or (s, r); writes phase_grid.csv.
    PhaseGrid {
        #[command(flatten)]
        common: Common,
    },
    /// Mean error against m under outliers and noise; writes noise_stability.csv.
    NoiseSweep {
        #[command(flatten)]
        common: Common,
    },
    /// Error traces of both algorithms; writes convergence.csv.
    Convergence {
        #[command(flatten)]
        common: Common,
    },
    /// Concentration, isometry and regularity checks; writes diagnose.json.
    Diagnose {
        #[command(flatten)]
        common: Common,
    },
    /// Generate an instance; writes instance.json.
    GenInstance {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum AlgorithmArg {
    MedianTgd,
    VanillaGd,
}

#[derive(Args)]
struct Common {
    /// TOML experiment spec; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    trials: Option<usize>,
    /// Allow dimensions beyond desk scale.
    #[arg(long)]
    full: bool,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    alpha_y: Option<f64>,
    #[arg(long)]
    alpha_h: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Single rank, replacing the rank grid.
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    n1: Option<usize>,
    #[arg(long)]
    n2: Option<usize>,
    /// Comma-separated measurement counts.
    #[arg(long, value_delimiter = ',')]
    m: Option<Vec<usize>>,
    /// Comma-separated outlier fractions.
    #[arg(long, value_delimiter = ',')]
    s: Option<Vec<f64>>,
    #[arg(long)]
    noise_scale: Option<f64>,
}

impl Common {
    fn overrides(&self) -> SpecOverrides {
        SpecOverrides {
            master_seed: self.seed,
            out: self.out.clone(),
            trials: self.trials,
            full: self.full.then_some(true),
            alpha_y: self.alpha_y,
            alpha_h: self.alpha_h,
            step_mu: self.mu,
            lambda: self.lambda,
            r_grid: self.rank.map(|r| vec![r]),
            max_iters: self.max_iters,
            n1: self.n1,
            n2: self.n2,
            m_grid: self.m.clone(),
            s_grid: self.s.clone(),
            noise_scale: self.noise_scale,
            ..Default::default()
        }
    }

    /// Config file, then flags, then `kind` if the file left it open.
    fn resolve(&self, allowed: &[ExperimentKind]) -> Result<ExperimentSpec> {
        self.resolve_with(allowed, SpecOverrides::default())
    }

    /// As [`Common::resolve`], with `fixed` taking precedence over everything.
    fn resolve_with(&self, allowed: &[ExperimentKind], fixed: SpecOverrides) -> Result<ExperimentSpec> {
        if let Some(n) = self.threads {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        }
        let base = match &self.config {
            Some(path) => SpecOverrides::from_file(path)?,
            None => SpecOverrides::default(),
        };
        let mut merged = base.merge(self.overrides()).merge(fixed);
        match merged.kind {
            Some(kind) if !allowed.contains(&kind) => {
                let names: Vec<&str> = allowed.iter().map(|k| k.name()).collect();
                return Err(Error::InvalidArgument(format!(
                    "config kind {} does not match this subcommand (expected {})",
                    kind.name(),
                    names.join(" or ")
                )));
            }
            Some(_) => {}
            None => merged.kind = Some(allowed[0]),
        }
        merged.resolve()
    }
}

const ANY_KIND: [ExperimentKind; 5] = [
    ExperimentKind::ConvergenceCompare,
    ExperimentKind::PhaseGridMr,
    ExperimentKind::PhaseGridSr,
    ExperimentKind::NoiseStability,
    ExperimentKind::Diagnose,
];

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

#[derive(Serialize)]
struct FactorsDocument<'a> {
    schema: &'static str,
    algorithm: Algorithm,
    stop: String,
    seeds: Seeds,
    spec: &'a ExperimentSpec,
    #[serde(flatten)]
    factors: &'a FactorPair,
}

fn recover(instance: Option<PathBuf>, algorithm: Algorithm, common: &Common) -> Result<()> {
    let (spec, problem) = match instance {
        Some(path) => {
            let text = std::fs::read_to_string(&path).map_err(|source| Error::Io { path: path.clone(), source })?;
            let problem = ProblemInstance::from_json(&text, StoragePolicy::default())?;
            let fixed = SpecOverrides {
                n1: Some(problem.n1()),
                n2: Some(problem.n2()),
                m_grid: Some(vec![problem.m()]),
                r_grid: Some(vec![problem.rank]),
                s_grid: Some(vec![problem.outlier_fraction]),
                outlier_scale: Some(problem.outlier_scale),
                noise_scale: Some(problem.noise_scale),
                ..Default::default()
            };
            (common.resolve_with(&ANY_KIND, fixed)?, problem)
        }
        None => {
            let spec = common.resolve(&ANY_KIND)?;
            let problem = harness::single_instance(&spec)?;
            (spec, problem)
        }
    };
    let trace = run_recovery(&problem, &spec.recovery_config(problem.rank, algorithm))?;
    ensure_dir(&spec.out)?;

    let mut csv = Vec::new();
    writeln!(csv, "# schema: median-tgd.trace.v1").unwrap();
    writeln!(csv, "# seeds: ensemble={} instance={}", problem.ensemble_seed, problem.instance_seed).unwrap();
    writeln!(csv, "# spec:").unwrap();
    for line in spec.to_toml().lines() {
        writeln!(csv, "#   {line}").unwrap();
    }
    trace.write_csv(&mut csv).unwrap();
    write_text(&spec.out.join("trace.csv"), &String::from_utf8(csv).unwrap())?;

    let doc = FactorsDocument {
        schema: "median-tgd.factors.v1",
        algorithm,
        stop: format!("{:?}", trace.stop),
        seeds: Seeds { ensemble: problem.ensemble_seed, instance: problem.instance_seed },
        spec: &spec,
        factors: &trace.factors,
    };
    write_text(&spec.out.join("factors.json"), &serde_json::to_string_pretty(&doc)?)?;

    let last = trace.final_record();
    match last.normalized_error {
        Some(e) => println!("{} iterations, stop {:?}, normalized error {e:e}", last.iter, trace.stop),
        None => println!("{} iterations, stop {:?}", last.iter, trace.stop),
    }
    println!("wrote {}", spec.out.display());
    Ok(())
}

fn gen_instance(common: &Common) -> Result<()> {
    let spec = common.resolve(&ANY_KIND)?;
    let problem = harness::single_instance(&spec)?;
    ensure_dir(&spec.out)?;
    let path = spec.out.join("instance.json");
    write_text(&path, &problem.to_json()?)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn experiment(common: &Common, allowed: &[ExperimentKind]) -> Result<()> {
    let spec = common.resolve(allowed)?;
    let path = harness::run_experiment(&spec)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Recover { instance, algorithm, common } => {
            let algorithm = match algorithm {
                AlgorithmArg::MedianTgd => Algorithm::MedianTgd,
                AlgorithmArg::VanillaGd => Algorithm::VanillaGd,
            };
            recover(instance, algorithm, &common)
        }
        Command::PhaseGrid { common } => {
            experiment(&common, &[ExperimentKind::PhaseGridMr, ExperimentKind::PhaseGridSr])
        }
        Command::NoiseSweep { common } => experiment(&common, &[ExperimentKind::NoiseStability]),
        Command::Convergence { common } => experiment(&common, &[ExperimentKind::ConvergenceCompare]),
        Command::Diagnose { common } => experiment(&common, &[ExperimentKind::Diagnose]),
        Command::GenInstance { common } => gen_instance(&common),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
