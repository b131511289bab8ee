//! `skimfa`: fit sparse kernel interaction models, select variables, export
//! functional ANOVA decompositions and run synthetic benchmarks.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use skimfa::synthbench::Regime;
use skimfa::{BasisKind, BasisSpec};

mod commands;
mod data;
mod manifest;

#[derive(Debug)]
pub enum AppError {
    User(String),
    Numerical(String),
}

impl AppError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        AppError::User(format!("{}: {e}", path.display()))
    }

    fn exit_code(&self) -> u8 {
        match self {
            AppError::User(_) => 2,
            AppError::Numerical(_) => 3,
        }
    }
}

impl std::fmt::Display for AppError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AppError::User(m) => write!(f, "{m}"),
            AppError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<skimfa::Error> for AppError {
    fn from(e: skimfa::Error) -> Self {
        if e.is_numerical() {
            AppError::Numerical(e.to_string())
        } else {
            AppError::User(e.to_string())
        }
    }
}

#[derive(Parser)]
#[command(name = "skimfa", version, about = "Sparse kernel interaction models with functional ANOVA reporting")]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn the kernel hyperparameters and fit the model.
    Fit(FitConfig),
    /// Predict with a fitted model.
    Predict(PredictConfig),
    /// List the selected covariates of a fitted model.
    Select(SelectConfig),
    /// Export the functional ANOVA decomposition of a fitted model.
    Decompose(DecomposeConfig),
    /// Run synthetic benchmark scenarios end to end.
    Bench(BenchConfig),
    /// Write a synthetic data set.
    Generate(GenerateConfig),
    /// Rerun the configuration recorded in a manifest.
    Replay(ReplayArgs),
}

/// Everything needed to rerun a command; stored in each manifest.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum RunConfig {
    Fit(FitConfig),
    Predict(PredictConfig),
    Select(SelectConfig),
    Decompose(DecomposeConfig),
    Bench(BenchConfig),
    Generate(GenerateConfig),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisArg {
    Spline,
    Poly,
    OneHot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeasureArg {
    Product,
    Joint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegimeArg {
    WeakMain,
    Equal,
    MainOnly,
    Null,
}

impl From<RegimeArg> for Regime {
    fn from(r: RegimeArg) -> Self {
        match r {
            RegimeArg::WeakMain => Regime::WeakMain,
            RegimeArg::Equal => Regime::Equal,
            RegimeArg::MainOnly => Regime::MainOnly,
            RegimeArg::Null => Regime::Null,
        }
    }
}

/// Model and training settings shared by `fit` and `bench`.
#[derive(Args, Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainArgs {
    /// Maximum interaction order.
    #[arg(long, default_value_t = 2)]
    pub q: usize,
    #[arg(long, value_enum, default_value_t = BasisArg::Spline)]
    pub basis: BasisArg,
    /// Knots per covariate for spline bases.
    #[arg(long, default_value_t = 5)]
    pub knots: usize,
    /// Degree for polynomial bases.
    #[arg(long, default_value_t = 3)]
    pub degree: usize,
    #[arg(long, default_value_t = 2000)]
    pub iters: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    /// Fraction of rows held out at each iteration.
    #[arg(long = "holdout-frac", default_value_t = 0.2)]
    pub holdout_frac: f64,
}

impl Default for TrainArgs {
    fn default() -> Self {
        TrainArgs {
            q: 2,
            basis: BasisArg::Spline,
            knots: 5,
            degree: 3,
            iters: 2000,
            lr: 0.1,
            holdout_frac: 0.2,
        }
    }
}

impl TrainArgs {
    pub fn basis_spec(&self) -> BasisSpec {
        BasisSpec::uniform(match self.basis {
            BasisArg::Spline => BasisKind::NaturalCubicSpline { num_knots: self.knots },
            BasisArg::Poly => BasisKind::Polynomial { degree: self.degree },
            BasisArg::OneHot => BasisKind::OneHot,
        })
    }

    pub fn label(&self) -> String {
        let basis = match self.basis {
            BasisArg::Spline => format!("spline{}", self.knots),
            BasisArg::Poly => format!("poly{}", self.degree),
            BasisArg::OneHot => "onehot".into(),
        };
        format!("skimfa-q{}-{basis}-T{}", self.q, self.iters)
    }
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct FitConfig {
    /// CSV with a header row.
    #[arg(long)]
    pub input: PathBuf,
    /// Name of the response column.
    #[arg(long)]
    pub target: String,
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct PredictConfig {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct SelectConfig {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct DecomposeConfig {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum, default_value_t = MeasureArg::Product)]
    pub measure: MeasureArg,
    /// Monte Carlo draws for the change of basis and variance shares.
    #[arg(long = "mc-samples", default_value_t = 100_000)]
    pub mc_samples: usize,
    /// Grid points per axis for effect tables.
    #[arg(long, default_value_t = 50)]
    pub grid: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioArgs {
    #[arg(long, default_value_t = 250)]
    pub p: usize,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 0.8)]
    pub r2: f64,
    #[arg(long = "signal-variance", default_value_t = 20.0)]
    pub signal_variance: f64,
}

impl Default for ScenarioArgs {
    fn default() -> Self {
        ScenarioArgs {
            p: 250,
            n: 1000,
            r2: 0.8,
            signal_variance: 20.0,
        }
    }
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct GenerateConfig {
    #[arg(long, value_enum, default_value_t = RegimeArg::Equal)]
    pub regime: RegimeArg,
    #[command(flatten)]
    #[serde(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    /// TOML or JSON file with any of these settings; flags are ignored when set.
    #[arg(long)]
    #[serde(skip_serializing)]
    pub config: Option<PathBuf>,
    /// Regimes to run (repeatable).
    #[arg(long = "regime", value_enum, default_values_t = [RegimeArg::Equal])]
    pub regimes: Vec<RegimeArg>,
    /// Scenario seeds (repeatable).
    #[arg(long = "seed", default_values_t = [0])]
    pub seeds: Vec<u64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub scenario: ScenarioArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainArgs,
    /// Fresh draws for estimating effect norms.
    #[arg(long = "mc-samples", default_value_t = 100_000)]
    pub mc_samples: usize,
    #[arg(long, default_value = "bench-out")]
    pub out: PathBuf,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            config: None,
            regimes: vec![RegimeArg::Equal],
            seeds: vec![0],
            scenario: ScenarioArgs::default(),
            train: TrainArgs::default(),
            mc_samples: 100_000,
            out: PathBuf::from("bench-out"),
        }
    }
}

#[derive(Args)]
struct ReplayArgs {
    /// Manifest file or the directory holding it.
    manifest: PathBuf,
    /// Write outputs here instead of the recorded directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn replay(args: ReplayArgs) -> Result<(), AppError> {
    let m = manifest::load(&args.manifest)?;
    let mut config = m.config;
    if let Some(out) = args.out {
        match &mut config {
            RunConfig::Fit(c) => c.out = out,
            RunConfig::Predict(c) => c.out = out,
            RunConfig::Select(c) => c.out = Some(out),
            RunConfig::Decompose(c) => c.out = out,
            RunConfig::Bench(c) => c.out = out,
            RunConfig::Generate(c) => c.out = out,
        }
    }
    commands::run(config)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Fit(c) => commands::run(RunConfig::Fit(c)),
        Command::Predict(c) => commands::run(RunConfig::Predict(c)),
        Command::Select(c) => commands::run(RunConfig::Select(c)),
        Command::Decompose(c) => commands::run(RunConfig::Decompose(c)),
        Command::Bench(c) => commands::run(RunConfig::Bench(c)),
        Command::Generate(c) => commands::run(RunConfig::Generate(c)),
        Command::Replay(a) => replay(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
