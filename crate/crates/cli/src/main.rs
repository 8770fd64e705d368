mod error;
mod files;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gststream::data::CovarianceModel;
use gststream::filter::UpdateForm;
use gststream::report::ReportFormat;

use error::{CliError, CliResult};

#[derive(Parser, Debug)]
#[command(name = "gststream", version)]
#[command(about = "Streaming gate set tomography with an extended Kalman filter", long_about = None)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the fiducial/germ experiment design and its FOGI basis
    Design(DesignArgs),
    /// Draw a random truth model on the gauge-fixed slice
    Truth(TruthArgs),
    /// Simulate one observation per scheduled circuit from the truth model
    Sample(SampleArgs),
    /// Stream observations through the Kalman filter
    Filter(FilterArgs),
    /// Batched maximum-likelihood fits at germ-power boundaries
    Mle(MleArgs),
    /// Metrics, trajectories and plots from the filter log
    Report(ReportArgs),
    /// Every stage in order
    RunAll(RunAllArgs),
}

#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    /// Directory holding every stage's inputs and outputs
    #[arg(long, default_value = "out")]
    pub output_dir: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct DesignArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Number of qubits (1 or 2)
    #[arg(long, default_value_t = 1)]
    pub n: usize,
    /// Largest germ power; defaults to 32 for one qubit and 8 for two
    #[arg(long)]
    pub max_power: Option<usize>,
    #[arg(long, default_value_t = gststream::circuits::DEFAULT_SHOTS)]
    pub shots: u64,
    /// Seed of the stream-order shuffle
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct TruthArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Target average gate infidelity
    #[arg(long, default_value_t = 1e-2)]
    pub infidelity: f64,
    /// Share of the infidelity from Hamiltonian rates
    #[arg(long, default_value_t = 0.5)]
    pub coherent_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Overwrite one rate after drawing, e.g. Gx:H:X=0.01 (repeatable)
    #[arg(long, value_name = "LABEL=VALUE")]
    pub plant: Vec<String>,
}

#[derive(Args, Debug, Clone)]
pub struct SampleArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Record exact probabilities instead of sampled counts
    #[arg(long)]
    pub noise_free: bool,
}

#[derive(Args, Debug, Clone)]
pub struct FilterArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub covariance: Option<CovarianceModel>,
    #[arg(long)]
    pub update: Option<UpdateForm>,
    /// Initial covariance trace; defaults to the truth model's average gate infidelity
    #[arg(long)]
    pub rb_r: Option<f64>,
    /// Continue from a checkpoint written by an earlier run
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Observation stream; `-` reads standard input
    #[arg(long)]
    pub observations: Option<String>,
    /// Stop after this many updates
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Updates between checkpoints
    #[arg(long, default_value_t = 100)]
    pub checkpoint_every: usize,
    /// Model parameter labels whose estimates are logged
    #[arg(long)]
    pub track: Vec<String>,
}

#[derive(Args, Debug, Clone)]
pub struct MleArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Germ powers at which to fit, comma separated; defaults to every batch
    #[arg(long, value_delimiter = ',')]
    pub batches: Vec<usize>,
    #[arg(long, default_value = "dirichlet")]
    pub covariance: CovarianceModel,
}

#[derive(Args, Debug, Clone)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, default_value = "svg")]
    pub format: ReportFormat,
}

#[derive(Args, Debug, Clone)]
pub struct RunAllArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, default_value_t = 1)]
    pub n: usize,
    #[arg(long)]
    pub max_power: Option<usize>,
    #[arg(long, default_value_t = gststream::circuits::DEFAULT_SHOTS)]
    pub shots: u64,
    /// Seeds the design shuffle, the truth draw and the sampler
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-2)]
    pub infidelity: f64,
    #[arg(long, default_value_t = 0.5)]
    pub coherent_fraction: f64,
    #[arg(long, value_name = "LABEL=VALUE")]
    pub plant: Vec<String>,
    #[arg(long)]
    pub noise_free: bool,
    #[arg(long, default_value = "dirichlet")]
    pub covariance: CovarianceModel,
    #[arg(long, default_value = "simple")]
    pub update: UpdateForm,
    #[arg(long)]
    pub rb_r: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub batches: Vec<usize>,
    #[arg(long, default_value = "svg")]
    pub format: ReportFormat,
}

/// Caps the rayon pool at `GSTSTREAM_THREADS` when it is set.
fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("GSTSTREAM_THREADS") else {
        return Ok(());
    };
    let cap: usize =
        raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            CliError::validation(format!("GSTSTREAM_THREADS must be a positive integer, got {raw:?}"))
        })?;
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    rayon::ThreadPoolBuilder::new()
        .num_threads(cap.min(available))
        .build_global()
        .map_err(|e| CliError::validation(e.to_string()))
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    match cli.command {
        Command::Design(args) => stages::design(&args),
        Command::Truth(args) => stages::truth(&args),
        Command::Sample(args) => stages::sample(&args),
        Command::Filter(args) => stages::filter(&args),
        Command::Mle(args) => stages::mle(&args),
        Command::Report(args) => stages::report(&args),
        Command::RunAll(args) => stages::run_all(&args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
