//! `ratefactor` command-line interface.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use ratefactor::simgen::TwoWayKind;
use ratefactor::staffing::Rounding;
use ratefactor::Link;

mod commands;
mod files;

/// Seed used when `--seed` is not given.
pub const DEFAULT_SEED: u64 = 20_030_106;

#[derive(Parser, Debug)]
#[command(name = "ratefactor", version, about = "Poisson factor models for arrival-rate forecasting, intraday updating and staffing")]
pub struct Cli {
    /// Master random seed; every output is reproducible for a given seed.
    #[arg(long, global = true, default_value_t = DEFAULT_SEED)]
    pub seed: u64,

    /// Link function for model fitting.
    #[arg(long, global = true, value_enum, default_value_t = LinkArg::Sqrt)]
    pub link: LinkArg,

    /// Only report errors.
    #[arg(long, short, global = true, conflicts_with = "verbose")]
    pub quiet: bool,

    /// More log output (repeat for debug detail).
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    /// Main output file; side outputs are written next to it.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LinkArg {
    Identity,
    Log,
    Sqrt,
}

impl From<LinkArg> for Link {
    fn from(l: LinkArg) -> Self {
        match l {
            LinkArg::Identity => Link::Identity,
            LinkArg::Log => Link::Log,
            LinkArg::Sqrt => Link::Sqrt,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit a factor model to a count CSV (writes model.json and model.scores.json).
    Fit(FitArgs),
    /// Forecast the next day's rate profile (writes forecast.json).
    Forecast(ForecastArgs),
    /// Update a forecast with the current day's early counts (writes updated.json).
    Update(UpdateArgs),
    /// Staffing levels from a forecast or updated forecast (writes staffing.csv).
    Staff(StaffArgs),
    /// Simulate counts from the MUL or ADD model (writes counts.csv and counts.rates.csv).
    Simulate(SimulateArgs),
    /// Rolling out-of-sample evaluation (writes report.csv and report.summary.json).
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("k").required(true).args(["factors", "select_k"])))]
pub struct FitArgs {
    /// Count CSV: header `date,dow,<interval labels>`.
    pub input: PathBuf,
    /// Number of factors K.
    #[arg(long)]
    pub factors: Option<usize>,
    /// Fit K = 1..KMAX, write the deviance table, keep the suggested K.
    #[arg(long, value_name = "KMAX")]
    pub select_k: Option<usize>,
    /// Maximum outer iterations of the alternating fit.
    #[arg(long, default_value_t = 100)]
    pub max_iters: usize,
    /// Relative deviance-change tolerance.
    #[arg(long, default_value_t = 1e-7)]
    pub tol: f64,
}

#[derive(Args, Debug)]
pub struct ForecastArgs {
    /// model.json written by `fit`.
    pub model: PathBuf,
    /// Score time-series model; defaults to the `.scores.json` next to the model.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Days ahead.
    #[arg(long, default_value_t = 1)]
    pub horizon: usize,
    /// Number of bootstrap replicates.
    #[arg(long, value_name = "B")]
    pub bootstrap: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Baseline {
    Hp,
    None,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("cutpoint").args(["cut", "cut_time"])))]
pub struct UpdateArgs {
    pub model: PathBuf,
    pub forecast: PathBuf,
    /// Count CSV whose last row holds the current day's early counts.
    pub partial: PathBuf,
    /// Number of observed early intervals m0.
    #[arg(long)]
    pub cut: Option<usize>,
    /// First unobserved interval label, e.g. 10:00.
    #[arg(long, value_name = "HH:MM")]
    pub cut_time: Option<String>,
    /// Penalty ω, or `auto` to choose it on --history.
    #[arg(long, default_value = "1000")]
    pub omega: String,
    /// History CSV for `--omega auto`.
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub holdout: usize,
    #[arg(long, default_value_t = 100)]
    pub window: usize,
    /// Also write the volume-ratio update of the forecast (`.hp.json`).
    #[arg(long, value_enum, default_value_t = Baseline::None)]
    pub baseline: Baseline,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RoundingArg {
    None,
    Ceil,
}

impl From<RoundingArg> for Rounding {
    fn from(r: RoundingArg) -> Self {
        match r {
            RoundingArg::None => Rounding::None,
            RoundingArg::Ceil => Rounding::Ceil,
        }
    }
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("grade").args(["theta", "delay_prob"])))]
pub struct StaffArgs {
    /// forecast.json or updated.json.
    pub forecast: PathBuf,
    /// Calls one agent handles per interval.
    #[arg(long)]
    pub service_rate: f64,
    /// Safety factor θ (default 1).
    #[arg(long, allow_negative_numbers = true)]
    pub theta: Option<f64>,
    /// Target delay probability α instead of θ.
    #[arg(long)]
    pub delay_prob: Option<f64>,
    #[arg(long, value_enum, default_value_t = RoundingArg::None)]
    pub rounding: RoundingArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModelKind {
    Mul,
    Add,
}

impl From<ModelKind> for TwoWayKind {
    fn from(k: ModelKind) -> Self {
        match k {
            ModelKind::Mul => TwoWayKind::Mul,
            ModelKind::Add => TwoWayKind::Add,
        }
    }
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long, value_enum, default_value_t = ModelKind::Mul)]
    pub model: ModelKind,
    /// Parameter JSON; the shipped study parameters when omitted.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub days: usize,
    /// Date of the first (week)day.
    #[arg(long, default_value = "2003-01-06")]
    pub start_date: String,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    pub counts: PathBuf,
    /// Hidden rates to score against; staffing mode when omitted.
    #[arg(long)]
    pub rates: Option<PathBuf>,
    #[arg(long, default_value_t = 150)]
    pub train: usize,
    #[arg(long, default_value_t = 20)]
    pub test: usize,
    /// Comma-separated methods: TS<K>, PML<K>, MUL, ADD, HPM, HPA.
    #[arg(long, default_value = "TS1,TS2,TS3,TS4,MUL,ADD")]
    pub methods: String,
    #[arg(long, conflicts_with = "cut_time")]
    pub cut: Option<usize>,
    #[arg(long, value_name = "HH:MM")]
    pub cut_time: Option<String>,
    /// Score only intervals from this index on.
    #[arg(long, conflicts_with = "mask_time")]
    pub mask_from: Option<usize>,
    #[arg(long, value_name = "HH:MM")]
    pub mask_time: Option<String>,
    /// Penalty ω for PML methods, or `auto`.
    #[arg(long, default_value = "1000")]
    pub omega: String,
    #[arg(long, default_value_t = 50)]
    pub holdout: usize,
    #[arg(long, default_value_t = 100)]
    pub window: usize,
    #[arg(long, value_name = "B")]
    pub bootstrap: Option<usize>,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// Keep the first window's loadings instead of refitting every day.
    #[arg(long)]
    pub fixed_loadings: bool,
    /// Service rate for staffing mode.
    #[arg(long, default_value_t = 3.0)]
    pub service_rate: f64,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub theta: f64,
}

fn init_logging(cli: &Cli) {
    let level = if cli.quiet {
        log::LevelFilter::Error
    } else {
        match cli.verbose {
            0 => log::LevelFilter::Warn,
            1 => log::LevelFilter::Info,
            _ => log::LevelFilter::Debug,
        }
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("RATE_FACTOR_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| anyhow::anyhow!("RATE_FACTOR_THREADS={v:?} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

/// 3 for numerical failures inside the library, 2 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<ratefactor::Error>() {
        Some(e) if e.is_numeric() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(&cli);
    match init_threads().and_then(|_| commands::run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
