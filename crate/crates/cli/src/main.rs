//! Command-line front end: fit a longitudinal dataset, run sparse variable
//! selection, or replicate a simulation design, writing plot-ready tables
//! and a full-precision JSON companion to an output directory.
//!
//! Settings come from flags, optionally seeded by a TOML config file given
//! with `--config`; explicit flags override file values.  Every artifact is
//! written atomically (temp file + rename), and a fixed configuration with a
//! fixed seed produces byte-identical outputs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use plsim::corr::{CorrelationKind, VariancePooling};
use plsim::gee::GeeConfig;
use plsim::qif::QifConfig;
use plsim::select::{tune_lambdas, EngineConfig, PenaltyConfig};
use plsim::sim::{run_replications, Method, SimDesign};
use plsim::smooth::BandwidthPolicy;
use plsim::{Dataset, Fit};

mod output;

/// Exit status reported when a fit finishes without meeting the
/// convergence rule; artifacts (including the trace) are still written.
const EXIT_NOT_CONVERGED: u8 = 3;

#[derive(Parser)]
#[command(
    name = "plsim",
    version,
    about = "Partially linear single-index models for longitudinal data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate index and linear coefficients from a CSV dataset.
    Fit(FitArgs),
    /// Sparse estimation: sweep penalty rates, keep the best BIC fit.
    Select(SelectArgs),
    /// Replicate a built-in simulation design and tabulate the metrics.
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum MethodArg {
    /// Bias-corrected GEE with the chosen working correlation.
    Gee,
    /// Bias-corrected QIF with the chosen working correlation.
    Qif,
    /// GEE under working independence (ignores `--working`).
    Independence,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum WorkingArg {
    Independence,
    Exchangeable,
    Ar1,
}

impl WorkingArg {
    fn kind(self) -> CorrelationKind {
        match self {
            WorkingArg::Independence => CorrelationKind::Independence,
            WorkingArg::Exchangeable => CorrelationKind::Exchangeable,
            WorkingArg::Ar1 => CorrelationKind::Ar1,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "snake_case")]
enum PoolingArg {
    Pooled,
    PerSubject,
}

impl PoolingArg {
    fn pooling(self) -> VariancePooling {
        match self {
            PoolingArg::Pooled => VariancePooling::Pooled,
            PoolingArg::PerSubject => VariancePooling::PerSubject,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum DesignArg {
    Example1,
    Example2,
    Example3,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum SimMethodArg {
    Gee,
    Qif,
    PenalizedGee,
    PenalizedQif,
    OracleGee,
    OracleQif,
}

/// Solver settings shared by every subcommand.
#[derive(Args)]
struct SolverArgs {
    /// Estimating-equation family.
    #[arg(long, value_enum)]
    method: Option<MethodArg>,

    /// Working correlation structure.
    #[arg(long, value_enum)]
    working: Option<WorkingArg>,

    /// Marginal variance pooling across subjects.
    #[arg(long, value_enum)]
    pooling: Option<PoolingArg>,

    /// Fixed smoothing bandwidth; omit to cross-validate.
    #[arg(long)]
    bandwidth: Option<f64>,

    /// Comma-separated cross-validation bandwidth grid.
    #[arg(long, value_delimiter = ',')]
    cv_grid: Option<Vec<f64>>,

    /// Ridge added to the local-linear denominator.
    #[arg(long)]
    kernel_ridge: Option<f64>,

    /// Outer iteration cap.
    #[arg(long)]
    max_iterations: Option<usize>,

    /// Convergence threshold on the step norm.
    #[arg(long)]
    tolerance: Option<f64>,

    /// Initial step length multiplier in (0, 1].
    #[arg(long)]
    damping: Option<f64>,
}

#[derive(Args)]
struct CommonArgs {
    /// TOML file supplying defaults for any flag not given explicitly.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Directory the artifacts are written to (created if missing).
    #[arg(long, short)]
    out: Option<PathBuf>,

    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args)]
struct FitArgs {
    /// Input dataset (CSV: subject,y,x1..xp,z1..zq).
    #[arg(long)]
    data: Option<PathBuf>,

    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct SelectArgs {
    /// Input dataset (CSV: subject,y,x1..xp,z1..zq).
    #[arg(long)]
    data: Option<PathBuf>,

    /// Comma-separated rates for the index block; omit for automatic.
    #[arg(long, value_delimiter = ',')]
    lambda1_grid: Option<Vec<f64>>,

    /// Comma-separated rates for the linear block; omit for automatic.
    #[arg(long, value_delimiter = ',')]
    lambda2_grid: Option<Vec<f64>>,

    /// SCAD shape constant.
    #[arg(long)]
    scad_shape: Option<f64>,

    /// Magnitude at or below which a penalized coefficient becomes zero.
    #[arg(long)]
    zero_threshold: Option<f64>,

    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct SimulateArgs {
    /// Built-in simulation design.
    #[arg(long, value_enum)]
    design: Option<DesignArg>,

    /// Number of subjects per replicate.
    #[arg(long)]
    n_subjects: Option<usize>,

    /// Generating error correlation for designs that admit both.
    #[arg(long, value_enum)]
    error_kind: Option<WorkingArg>,

    /// Replications to run.
    #[arg(long)]
    replications: Option<usize>,

    /// Base RNG seed; omit to keep the design's own.
    #[arg(long)]
    seed: Option<u64>,

    /// Estimators to tabulate (repeat or comma-separate).
    #[arg(long, value_enum, value_delimiter = ',')]
    methods: Option<Vec<SimMethodArg>>,

    /// Run replicates on the current thread only.
    #[arg(long)]
    serial: bool,

    #[command(flatten)]
    common: CommonArgs,
}

/// Optional TOML counterpart of the flags; explicit flags win.
#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    method: Option<MethodArg>,
    working: Option<WorkingArg>,
    pooling: Option<PoolingArg>,
    bandwidth: Option<f64>,
    cv_grid: Option<Vec<f64>>,
    kernel_ridge: Option<f64>,
    max_iterations: Option<usize>,
    tolerance: Option<f64>,
    damping: Option<f64>,
    lambda1_grid: Option<Vec<f64>>,
    lambda2_grid: Option<Vec<f64>>,
    scad_shape: Option<f64>,
    zero_threshold: Option<f64>,
    design: Option<DesignArg>,
    n_subjects: Option<usize>,
    error_kind: Option<WorkingArg>,
    replications: Option<usize>,
    seed: Option<u64>,
    methods: Option<Vec<SimMethodArg>>,
    serial: Option<bool>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("malformed config file {}", path.display()))
    }
}

/// Flag-over-file resolution of everything a solver needs.
struct Resolved {
    method: MethodArg,
    working: CorrelationKind,
    pooling: Option<VariancePooling>,
    bandwidth: BandwidthPolicy<f64>,
    cv_grid: Option<Vec<f64>>,
    kernel_ridge: f64,
    max_iterations: usize,
    tolerance: f64,
    damping: f64,
    out: PathBuf,
}

impl Resolved {
    fn new(common: &CommonArgs, file: &FileConfig) -> Result<Self> {
        let method = common.solver.method.or(file.method).unwrap_or(MethodArg::Gee);
        let working = match method {
            MethodArg::Independence => CorrelationKind::Independence,
            _ => common
                .solver
                .working
                .or(file.working)
                .unwrap_or(WorkingArg::Exchangeable)
                .kind(),
        };
        let bandwidth = match common.solver.bandwidth.or(file.bandwidth) {
            Some(h) => {
                if !(h > 0.0) || !h.is_finite() {
                    bail!("--bandwidth must be positive and finite, got {h}");
                }
                BandwidthPolicy::Fixed(h)
            }
            None => BandwidthPolicy::CvAtInit,
        };
        let cv_grid = match common.solver.cv_grid.clone().or_else(|| file.cv_grid.clone()) {
            Some(grid) if grid.is_empty() => bail!("--cv-grid must contain at least one value"),
            other => other,
        };
        let defaults = GeeConfig::<f64>::default();
        Ok(Self {
            method,
            working,
            pooling: common
                .solver
                .pooling
                .or(file.pooling)
                .map(PoolingArg::pooling),
            bandwidth,
            cv_grid,
            kernel_ridge: common
                .solver
                .kernel_ridge
                .or(file.kernel_ridge)
                .unwrap_or(defaults.kernel_ridge),
            max_iterations: common
                .solver
                .max_iterations
                .or(file.max_iterations)
                .unwrap_or(defaults.max_iterations),
            tolerance: common
                .solver
                .tolerance
                .or(file.tolerance)
                .unwrap_or(defaults.tolerance),
            damping: common.solver.damping.or(file.damping).unwrap_or(defaults.damping),
            out: common
                .out
                .clone()
                .or_else(|| file.out.clone())
                .unwrap_or_else(|| PathBuf::from(".")),
        })
    }

    fn gee_config(&self) -> GeeConfig<f64> {
        GeeConfig {
            working: self.working,
            pooling: self.pooling,
            bandwidth: self.bandwidth.clone(),
            cv_grid: self.cv_grid.clone(),
            kernel_ridge: self.kernel_ridge,
            max_iterations: self.max_iterations,
            tolerance: self.tolerance,
            damping: self.damping,
            ..GeeConfig::default()
        }
    }

    fn qif_config(&self) -> QifConfig<f64> {
        QifConfig {
            working: self.working,
            pooling: self.pooling,
            bandwidth: self.bandwidth.clone(),
            cv_grid: self.cv_grid.clone(),
            kernel_ridge: self.kernel_ridge,
            max_iterations: self.max_iterations,
            tolerance: self.tolerance,
            damping: self.damping,
            ..QifConfig::default()
        }
    }

    fn engine(&self) -> EngineConfig<f64> {
        match self.method {
            MethodArg::Qif => EngineConfig::Qif(self.qif_config()),
            _ => EngineConfig::Gee(self.gee_config()),
        }
    }

    fn method_label(&self) -> String {
        match self.method {
            MethodArg::Gee => format!("gee-{}", self.working.label()),
            MethodArg::Qif => format!("qif-{}", self.working.label()),
            MethodArg::Independence => "gee-independence".to_string(),
        }
    }

    fn solve(&self, data: &Dataset) -> plsim::Result<Fit> {
        match self.method {
            MethodArg::Qif => plsim::qif::solve_qif(data, &self.qif_config()),
            _ => plsim::gee::solve_gee(data, &self.gee_config()),
        }
    }
}

fn load_dataset(data: Option<&Path>, file: &FileConfig) -> Result<Dataset> {
    let path = data
        .map(Path::to_path_buf)
        .or_else(|| file.data.clone())
        .context("no dataset given: pass --data or set `data` in the config file")?;
    plsim::io::read_dataset_path(&path)
        .with_context(|| format!("cannot load dataset {}", path.display()))
}

fn run_fit(args: &FitArgs) -> Result<ExitCode> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let resolved = Resolved::new(&args.common, &file)?;
    let data = load_dataset(args.data.as_deref(), &file)?;
    let fit = resolved.solve(&data)?;
    output::write_fit_artifacts(&resolved.out, &data, &fit, &resolved.method_label(), None)?;
    if fit.converged {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "did not converge within {} iterations; see {}",
            fit.iterations,
            resolved.out.join("trace.log").display()
        );
        Ok(ExitCode::from(EXIT_NOT_CONVERGED))
    }
}

fn run_select(args: &SelectArgs) -> Result<ExitCode> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let resolved = Resolved::new(&args.common, &file)?;
    let data = load_dataset(args.data.as_deref(), &file)?;
    let mut pen = PenaltyConfig::<f64>::default();
    if let Some(c) = args.scad_shape.or(file.scad_shape) {
        pen.c = c;
    }
    if let Some(t) = args.zero_threshold.or(file.zero_threshold) {
        pen.zero_threshold = t;
    }
    for (name, flag, file_grid, slot) in [
        (
            "--lambda1-grid",
            &args.lambda1_grid,
            &file.lambda1_grid,
            &mut pen.lambda1_grid,
        ),
        (
            "--lambda2-grid",
            &args.lambda2_grid,
            &file.lambda2_grid,
            &mut pen.lambda2_grid,
        ),
    ] {
        match flag.clone().or_else(|| file_grid.clone()) {
            Some(grid) if grid.is_empty() => bail!("{name} must contain at least one value"),
            Some(grid) => *slot = grid,
            None => {}
        }
    }
    let selection = tune_lambdas(&data, &resolved.engine(), &pen)?;
    output::write_fit_artifacts(
        &resolved.out,
        &data,
        &selection.fit,
        &resolved.method_label(),
        Some(&selection),
    )?;
    if selection.fit.converged {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "selected fit did not converge within {} iterations; see {}",
            selection.fit.iterations,
            resolved.out.join("trace.log").display()
        );
        Ok(ExitCode::from(EXIT_NOT_CONVERGED))
    }
}

fn run_simulate(args: &SimulateArgs) -> Result<ExitCode> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let resolved = Resolved::new(&args.common, &file)?;
    let design_arg = args
        .design
        .or(file.design)
        .context("no design given: pass --design or set `design` in the config file")?;
    let error_kind = args
        .error_kind
        .or(file.error_kind)
        .unwrap_or(WorkingArg::Exchangeable)
        .kind();
    let mut design = match design_arg {
        DesignArg::Example1 => {
            SimDesign::example1(args.n_subjects.or(file.n_subjects).unwrap_or(60), error_kind)
        }
        DesignArg::Example2 => {
            SimDesign::example2(args.n_subjects.or(file.n_subjects).unwrap_or(100), error_kind)
        }
        DesignArg::Example3 => SimDesign::example3(args.n_subjects.or(file.n_subjects).unwrap_or(100)),
    };
    if let Some(seed) = args.seed.or(file.seed) {
        design.seed = seed;
    }
    let replications = args.replications.or(file.replications).unwrap_or(10);
    let methods: Vec<Method<f64>> = args
        .methods
        .clone()
        .or_else(|| file.methods.clone())
        .unwrap_or_else(|| vec![SimMethodArg::Gee])
        .into_iter()
        .map(|m| {
            let gee = resolved.gee_config();
            let qif = resolved.qif_config();
            match m {
                SimMethodArg::Gee => Method::Gee(gee),
                SimMethodArg::Qif => Method::Qif(qif),
                SimMethodArg::PenalizedGee => Method::PenalizedGee(gee, PenaltyConfig::default()),
                SimMethodArg::PenalizedQif => Method::PenalizedQif(qif, PenaltyConfig::default()),
                SimMethodArg::OracleGee => Method::OracleGee(gee),
                SimMethodArg::OracleQif => Method::OracleQif(qif),
            }
        })
        .collect();
    let serial = args.serial || file.serial.unwrap_or(false);
    let reports = run_replications(&design, &methods, replications, !serial)?;
    output::write_simulate_artifacts(&resolved.out, &design, &reports)?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Fit(args) => run_fit(args),
        Command::Select(args) => run_select(args),
        Command::Simulate(args) => run_simulate(args),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
