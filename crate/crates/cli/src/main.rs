use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use transfer_risk_cli::config::ExperimentConfig;
use transfer_risk_cli::error::{CliError, CliResult};
use transfer_risk_cli::runners;

/// Experiment harness for the exactly solvable transfer-learning model.
#[derive(Parser)]
#[command(name = "transfer-risk", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML; `.json` files are parsed as JSON).
    #[arg(long)]
    config: PathBuf,
    /// Base seed of every random stream in the run.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; 0 picks the machine default.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Exact risk curves over a sample-count grid (no simulation).
    Asymptotics(RunArgs),
    /// Monte Carlo risk curves joined with the exact values.
    Simulate(RunArgs),
    /// Spectrum-only representation design.
    SpectrumOpt(RunArgs),
    /// End-to-end representation optimization.
    FullOpt(RunArgs),
    /// Predictor comparison along one problem axis.
    Ablation(RunArgs),
    /// Alignment heat maps of an optimized representation.
    Heatmap(RunArgs),
    /// Pretraining sample-complexity sweep.
    Upstream(RunArgs),
    /// Run the built-in oracle battery and print one line per check.
    Selftest {
        /// Worker threads; 0 picks the machine default.
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
}

fn dispatch(command: &Command) -> CliResult<()> {
    let (args, kinds): (&RunArgs, &[&str]) = match command {
        Command::Asymptotics(a) => (a, &["risk-curve"]),
        Command::Simulate(a) => (a, &["risk-curve", "risk-curve-mc", "concentration"]),
        Command::SpectrumOpt(a) => (a, &["spectrum"]),
        Command::FullOpt(a) => (a, &["full-opt"]),
        Command::Ablation(a) => (a, &["ablation"]),
        Command::Heatmap(a) => (a, &["heatmap"]),
        Command::Upstream(a) => (a, &["upstream"]),
        Command::Selftest { threads } => {
            return in_pool(*threads, runners::selftest);
        }
    };
    let config = ExperimentConfig::load(&args.config)?;
    in_pool(args.threads, || {
        runners::run(&config, args.seed, &args.out, kinds)
    })
}

/// Runs the closure inside a dedicated thread pool of the requested size.
fn in_pool<T>(threads: usize, f: impl FnOnce() -> CliResult<T> + Send) -> CliResult<T>
where
    T: Send,
{
    let mut builder = rayon::ThreadPoolBuilder::new();
    if threads > 0 {
        builder = builder.num_threads(threads);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    pool.install(f)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
