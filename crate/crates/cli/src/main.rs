//! `wkrr`: simulate density flows, estimate energies from trajectories, and
//! run convergence and stability experiments.

mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use config::parse_json_arg;

/// Failure reported as one line of JSON on stderr.
#[derive(Debug)]
pub struct CliError {
    pub exit: u8,
    pub code: String,
    pub message: String,
}

impl CliError {
    /// Invalid configuration; exit status 2.
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            exit: 2,
            code: "invalid_config".into(),
            message: message.into(),
        }
    }

    /// A library error raised while validating inputs; exit status 2.
    pub fn validation(e: wkrr::Error) -> Self {
        Self {
            exit: 2,
            code: e.code().into(),
            message: e.to_string(),
        }
    }

    pub fn runtime(code: &str, message: impl Into<String>) -> Self {
        Self {
            exit: 1,
            code: code.into(),
            message: message.into(),
        }
    }
}

impl From<wkrr::Error> for CliError {
    fn from(e: wkrr::Error) -> Self {
        let exit = if matches!(e, wkrr::Error::MetaMissing(_)) { 2 } else { 1 };
        Self {
            exit,
            code: e.code().into(),
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::runtime("io_error", e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::runtime("json_error", e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "wkrr", version, about = "Learn potential and interaction energies of Wasserstein flows")]
struct Cli {
    #[command(flatten)]
    shared: Shared,
    #[command(subcommand)]
    command: Command,
}

/// Flags accepted by every subcommand. Precedence: defaults, then the config
/// document, then flags.
#[derive(Args, Debug, Clone)]
pub struct Shared {
    /// JSON config document.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory [default: out].
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed for every random draw [default: 0].
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads [default: all cores].
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a gradient or Hamiltonian flow and write the trajectory.
    Simulate(SimulateFlags),
    /// Estimate V and W from a trajectory.
    Estimate(EstimateFlags),
    /// Convergence-rate sweep over N against a known truth.
    Sweep(SweepFlags),
    /// Compare Hamiltonian dynamics of true and estimated energies.
    Stability(StabilityFlags),
    /// Per-slice W2 distance between two trajectories.
    W2(W2Flags),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Estimate(_) => "estimate",
            Command::Sweep(_) => "sweep",
            Command::Stability(_) => "stability",
            Command::W2(_) => "w2",
        }
    }
}

fn json_arg(s: &str) -> Result<Value, String> {
    parse_json_arg(s)
}

#[derive(Args, Serialize)]
pub struct SimulateFlags {
    /// gradient | hamiltonian
    #[arg(long)]
    flow: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    a: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    b: Option<f64>,
    #[arg(long)]
    horizon: Option<f64>,
    /// Spatial nodes.
    #[arg(long)]
    n: Option<usize>,
    /// Output time slices.
    #[arg(long)]
    l: Option<usize>,
    /// Potential field as JSON or @file.
    #[arg(long, value_parser = json_arg)]
    potential: Option<Value>,
    /// Interaction field as JSON or @file.
    #[arg(long, value_parser = json_arg)]
    interaction: Option<Value>,
    /// none | entropy | fisher | power:<m>
    #[arg(long)]
    u: Option<String>,
    /// Initial density as JSON or @file.
    #[arg(long, value_parser = json_arg)]
    initial: Option<Value>,
    /// Initial phase field as JSON or @file.
    #[arg(long, value_parser = json_arg)]
    phase: Option<Value>,
    #[arg(long)]
    dt_solver: Option<f64>,
    /// periodic | paper-truncated
    #[arg(long)]
    boundary: Option<String>,
    /// Base name of the trajectory file.
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args, Serialize)]
pub struct EstimateFlags {
    /// Trajectory CSV with its sidecar.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_parser = json_arg)]
    kernel1: Option<Value>,
    #[arg(long, value_parser = json_arg)]
    kernel2: Option<Value>,
    #[arg(long, value_parser = json_arg)]
    kernel3: Option<Value>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    lambda3: Option<f64>,
    #[arg(long)]
    flow: Option<String>,
    #[arg(long)]
    u: Option<String>,
    /// include | exclude
    #[arg(long)]
    terminal: Option<String>,
    /// auto | dense | feature
    #[arg(long)]
    route: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    #[serde(skip)]
    grid_a: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    #[serde(skip)]
    grid_b: Option<f64>,
    #[arg(long)]
    #[serde(skip)]
    grid_n: Option<usize>,
    /// Random span directions for the stationarity residual.
    #[arg(long)]
    directions: Option<usize>,
}

impl EstimateFlags {
    fn to_map(&self) -> serde_json::Map<String, Value> {
        let mut map = config::flag_map(self);
        let mut grid = serde_json::Map::new();
        if let Some(a) = self.grid_a {
            grid.insert("a".into(), a.into());
        }
        if let Some(b) = self.grid_b {
            grid.insert("b".into(), b.into());
        }
        if let Some(n) = self.grid_n {
            grid.insert("n".into(), n.into());
        }
        if !grid.is_empty() {
            map.insert("grid".into(), Value::Object(grid));
        }
        map
    }
}

#[derive(Args, Serialize)]
pub struct SweepFlags {
    /// Comma-separated increasing N values.
    #[arg(long, value_delimiter = ',')]
    n_list: Option<Vec<usize>>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    c_lambda: Option<f64>,
    #[arg(long)]
    c_l: Option<f64>,
    /// Ground truth {"v": .., "w": ..} as JSON or @file.
    #[arg(long, value_parser = json_arg)]
    truth: Option<Value>,
    /// Draw the truth from the seed instead of using the reference truth.
    #[arg(long)]
    random_truth: Option<bool>,
    #[arg(long, value_parser = json_arg)]
    kernel1: Option<Value>,
    #[arg(long, value_parser = json_arg)]
    kernel2: Option<Value>,
    #[arg(long)]
    amplitude: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    a: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    b: Option<f64>,
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long)]
    fine_factor: Option<usize>,
    #[arg(long, value_parser = json_arg)]
    initial: Option<Value>,
    #[arg(long)]
    flow: Option<String>,
    #[arg(long)]
    u: Option<String>,
    #[arg(long)]
    terminal: Option<String>,
    #[arg(long)]
    boundary: Option<String>,
    #[arg(long)]
    dt_solver: Option<f64>,
}

#[derive(Args, Serialize)]
pub struct StabilityFlags {
    #[command(flatten)]
    #[serde(flatten)]
    sweep: SweepFlags,
    /// functions.json from `estimate`; skips the sweep.
    #[arg(long)]
    estimate: Option<PathBuf>,
    #[arg(long)]
    stability_n: Option<usize>,
    #[arg(long)]
    stability_l: Option<usize>,
    #[arg(long)]
    stability_horizon: Option<f64>,
    #[arg(long, value_parser = json_arg)]
    stability_initial: Option<Value>,
    #[arg(long, value_parser = json_arg)]
    phase: Option<Value>,
    #[arg(long)]
    stability_dt: Option<f64>,
}

#[derive(Args, Serialize)]
pub struct W2Flags {
    #[arg(long)]
    rho: Option<PathBuf>,
    #[arg(long)]
    sigma: Option<PathBuf>,
    #[arg(long)]
    quantiles: Option<usize>,
    /// piecewise_constant | point_masses
    #[arg(long)]
    mass_model: Option<String>,
}

fn emit(e: &CliError) -> ExitCode {
    let line = serde_json::json!({"error": e.code, "message": e.message});
    eprintln!("{line}");
    ExitCode::from(e.exit)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let name = cli.command.name();
    let doc = config::load_config(cli.shared.config.as_deref(), name)?;
    let ctx = commands::Context::new(&cli.shared, &doc, name)?;
    if let Some(t) = ctx.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::config(e.to_string()))?;
    }
    match &cli.command {
        Command::Simulate(f) => commands::simulate(&ctx, config::resolve(&doc, config::flag_map(f))?),
        Command::Estimate(f) => commands::estimate(&ctx, config::resolve(&doc, f.to_map())?),
        Command::Sweep(f) => commands::sweep(&ctx, config::resolve(&doc, config::flag_map(f))?),
        Command::Stability(f) => commands::stability(&ctx, config::resolve(&doc, config::flag_map(f))?),
        Command::W2(f) => commands::w2(&ctx, config::resolve(&doc, config::flag_map(f))?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.to_string();
            let first = message.lines().next().unwrap_or("").trim_start_matches("error: ");
            return emit(&CliError::config(first));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => emit(&e),
    }
}
