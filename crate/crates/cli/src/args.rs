use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use mgcp_core::inference::OptimizerKind;
use mgcp_core::simulation::FleetKind;
use mgcp_core::ObservationWindow;

use crate::experiments::{ForecastStat, Method};

#[derive(Debug, Parser)]
#[command(
    name = "mgcp",
    version,
    about = "Fleet event prediction with MGCP-modulated Poisson processes"
)]
pub struct Cli {
    /// Base seed; every random stream is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for replicates and folds.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// TOML file with fit settings (quad_order, max_iters, num_inducing, ...).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a fleet and write events plus ground-truth intensities.
    Simulate(SimulateArgs),
    /// Fit a model to an event CSV.
    Fit(FitArgs),
    /// Predict intensity and event counts for one unit of a fitted model.
    Predict(PredictArgs),
    /// Synthetic benchmark against the single-unit baseline.
    Benchmark(BenchmarkArgs),
    /// Leave-one-out count forecasting study.
    CaseStudy(CaseStudyArgs),
}

fn parse_window(s: &str) -> Result<ObservationWindow, String> {
    s.parse().map_err(|e: mgcp_core::Error| e.to_string())
}

fn parse_kind(s: &str) -> Result<FleetKind, String> {
    s.parse().map_err(|e: mgcp_core::Error| e.to_string())
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind, String> {
    match s {
        "lbfgs" => Ok(OptimizerKind::Lbfgs),
        "adam" => Ok(OptimizerKind::Adam),
        other => Err(format!("unknown optimizer '{other}' (expected lbfgs or adam)")),
    }
}

/// Fit settings that override the config file when given.
#[derive(Debug, Clone, Default, Args)]
pub struct FitOverrides {
    /// Number of inducing points.
    #[arg(long)]
    pub num_inducing: Option<usize>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long, value_parser = parse_optimizer)]
    pub optimizer: Option<OptimizerKind>,
    /// Also optimize the inducing locations.
    #[arg(long)]
    pub optimize_inducing: bool,
    /// Gauss-Legendre order per panel.
    #[arg(long)]
    pub quad_order: Option<usize>,
    #[arg(long)]
    pub quad_panels: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_parser = parse_kind)]
    pub kind: FleetKind,
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    #[arg(long, value_parser = parse_window, default_value = "0:100")]
    pub window: ObservationWindow,
    /// Points of the evaluation grid in the truth file.
    #[arg(long, default_value_t = 200)]
    pub truth_grid: usize,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Event CSV with header `unit_id,event_time`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = parse_window, default_value = "0:100")]
    pub window: ObservationWindow,
    /// Shift all times so the window starts at zero.
    #[arg(long)]
    pub align_zero: bool,
    /// Unit to truncate before fitting.
    #[arg(long, requires = "percentile")]
    pub truncate_unit: Option<String>,
    /// Observation percentile for `--truncate-unit`.
    #[arg(long)]
    pub percentile: Option<f64>,
    #[command(flatten)]
    pub fit: FitOverrides,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Model JSON written by `fit`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub unit: String,
    #[arg(long)]
    pub t_star: f64,
    #[arg(long)]
    pub horizon: f64,
    /// Points of the intensity grid over the window.
    #[arg(long, default_value_t = 200)]
    pub grid_points: usize,
    /// Mix the count forecast over this many sampled intensity paths
    /// instead of the plug-in Poisson.
    #[arg(long)]
    pub sampled_paths: Option<usize>,
    /// Composite quadrature used for expected counts.
    #[arg(long, default_value_t = 10)]
    pub quad_order: usize,
    #[arg(long, default_value_t = 20)]
    pub quad_panels: usize,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[arg(long, value_parser = parse_kind)]
    pub kind: FleetKind,
    #[arg(long, default_value_t = 50)]
    pub replications: usize,
    #[arg(long, value_delimiter = ',', default_value = "0.3,0.6")]
    pub percentiles: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    #[arg(long, value_parser = parse_window, default_value = "0:100")]
    pub window: ObservationWindow,
    #[arg(long, value_delimiter = ',', default_value = "mgcp-pp,independent-baseline")]
    pub methods: Vec<Method>,
    /// Points of the RMS evaluation grid.
    #[arg(long, default_value_t = 200)]
    pub rms_grid: usize,
    #[command(flatten)]
    pub fit: FitOverrides,
}

#[derive(Debug, Args)]
pub struct CaseStudyArgs {
    /// Event CSV; a synthetic 20-unit surrogate is generated when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_parser = parse_window, default_value = "0:100")]
    pub window: ObservationWindow,
    #[arg(long, default_value_t = 0.5)]
    pub percentile: f64,
    #[arg(long, value_delimiter = ',', default_value = "5,10,15,20,25")]
    pub horizons: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "mgcp-pp,independent-baseline")]
    pub methods: Vec<Method>,
    /// Point forecast compared with the realized count.
    #[arg(long, default_value = "expected")]
    pub forecast_stat: ForecastStat,
    /// Sampled paths for `--forecast-stat sampled-median`.
    #[arg(long, default_value_t = 500)]
    pub sample_paths: usize,
    #[command(flatten)]
    pub fit: FitOverrides,
}
