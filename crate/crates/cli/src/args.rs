use clap::{Args, Parser, Subcommand, ValueEnum};
use formation_core::formation_opt::CheckpointSpacing;
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(
    name = "formation-opt",
    version,
    about = "Fisher-information formation optimization and range-based relative pose estimation"
)]
pub struct Cli {
    /// Worker threads for gradient probes and Monte-Carlo trials (default: all cores).
    #[arg(long, global = true, env = "FORMATION_OPT_THREADS", value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: Option<u16>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Descend the formation cost and write the trace, final formation and CRLB ellipses.
    Optimize(OptimizeArgs),
    /// Report J_est, J_col, J_total and the FIM spectrum of a state.
    Evaluate(StateArgs),
    /// Compare analytic range Jacobians with central finite differences.
    CheckJacobian(CheckJacobianArgs),
    /// Run one Gauss-Newton estimate from synthesized ranges.
    Estimate(EstimateArgs),
    /// Monte-Carlo estimation error at checkpoints of a descent trace.
    Montecarlo(MonteCarloArgs),
    /// Write 1σ CRLB position ellipses of a state.
    Crlb(StateArgs),
    /// List the built-in presets, or export them as scenario files.
    Presets(PresetsArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Scenario file (JSON).
    #[arg(long, value_name = "PATH", conflicts_with = "preset", required_unless_present = "preset")]
    pub scenario: Option<PathBuf>,
    /// Built-in scenario instead of a file.
    #[arg(long, value_name = "NAME")]
    pub preset: Option<String>,
    /// Output directory, created if missing.
    #[arg(long, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// RNG seed (default: the scenario's seed).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, Default, ValueEnum)]
pub enum Spacing {
    Uniform,
    #[default]
    Geometric,
}

impl From<Spacing> for CheckpointSpacing {
    fn from(s: Spacing) -> Self {
        match s {
            Spacing::Uniform => CheckpointSpacing::Uniform,
            Spacing::Geometric => CheckpointSpacing::Geometric,
        }
    }
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[command(flatten)]
    pub common: Common,
    /// Number of trace checkpoints that get CRLB ellipses.
    #[arg(long, default_value_t = 10)]
    pub checkpoints: usize,
    #[arg(long, value_enum, default_value_t = Spacing::Geometric)]
    pub spacing: Spacing,
}

#[derive(Debug, Args)]
pub struct StateArgs {
    #[command(flatten)]
    pub common: Common,
    /// State file as written by `optimize` (default: the scenario's initial state).
    #[arg(long, value_name = "PATH")]
    pub state: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckJacobianArgs {
    #[command(flatten)]
    pub common: Common,
    /// Random states checked after the scenario's own initial state.
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-6)]
    pub step: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
    /// Flip the sign of one analytic column (negative control).
    #[arg(long, hide = true)]
    pub corrupt_sign: bool,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub common: Common,
    /// True state (default: the scenario's initial state).
    #[arg(long, value_name = "PATH")]
    pub state: Option<PathBuf>,
    /// Attitude prior standard deviation (rad).
    #[arg(long, default_value_t = 0.08)]
    pub prior_sigma: f64,
}

#[derive(Debug, Args)]
pub struct MonteCarloArgs {
    #[command(flatten)]
    pub common: Common,
    /// `trace.json` written by `optimize` (default: run the descent first).
    #[arg(long, value_name = "PATH")]
    pub trace: Option<PathBuf>,
    /// Trials per checkpoint.
    #[arg(long, default_value_t = 2000)]
    pub trials: usize,
    /// Attitude prior standard deviation (rad).
    #[arg(long, default_value_t = 0.08)]
    pub prior_sigma: f64,
    #[arg(long, default_value_t = 10)]
    pub checkpoints: usize,
    #[arg(long, value_enum, default_value_t = Spacing::Geometric)]
    pub spacing: Spacing,
}

#[derive(Debug, Args)]
pub struct PresetsArgs {
    /// Write every preset to `<DIR>/<name>.json`.
    #[arg(long, value_name = "DIR")]
    pub export: Option<PathBuf>,
}
