use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pcrlb_cli::commands::{self, StageOutcome};
use pcrlb_cli::{CliOverrides, Result, RunConfig};

/// Posterior Cramér-Rao bound and error analysis of Bayesian parameter identification.
#[derive(Debug, Parser)]
#[command(name = "pcrlb", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate the trajectory ensemble and compute the parameter bound.
    Bound(RunArgs),
    /// Run the particle identifier on every simulated measurement record.
    Identify(RunArgs),
    /// Compare estimates with the bound and the reference posterior mean.
    Analyze(RunArgs),
    /// Run bound, identify and analyze in sequence.
    All(RunArgs),
    /// Print the registered model names.
    ListModels,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Registered model name.
    #[arg(long)]
    model: Option<String>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Run directory (default: $PCRLB_OUTPUT_ROOT/<model>-seed<seed>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Particles per identification run.
    #[arg(long)]
    particles: Option<usize>,
    /// Monte Carlo trajectories.
    #[arg(long)]
    mc_runs: Option<usize>,
    /// Time horizon.
    #[arg(long)]
    horizon: Option<usize>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let overrides = CliOverrides {
            model: self.model.clone(),
            seed: self.seed,
            workers: self.workers,
            out: self.out.clone(),
            particles: self.particles,
            mc_runs: self.mc_runs,
            horizon: self.horizon,
        };
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

fn report(outcome: &StageOutcome) {
    println!(
        "{}: {} files, {:.2} s",
        outcome.stage,
        outcome.files.len(),
        outcome.wall_clock_seconds
    );
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::ListModels => {
            for line in commands::list_models() {
                println!("{line}");
            }
        }
        Command::Bound(args) => report(&commands::cmd_bound(&args.resolve()?)?),
        Command::Identify(args) => {
            let out = commands::cmd_identify(&args.resolve()?)?;
            report(&out.stage);
            let failed = out.indices(commands::RunStatus::Failed);
            if !failed.is_empty() {
                println!("failed runs: {failed:?}");
            }
        }
        Command::Analyze(args) => {
            let out = commands::cmd_analyze(&args.resolve()?)?;
            report(&out.stage);
            println!("{}", serde_json::to_string_pretty(&out.summary).expect("summary serializes"));
        }
        Command::All(args) => {
            let config = args.resolve()?;
            report(&commands::cmd_bound(&config)?);
            report(&commands::cmd_identify(&config)?.stage);
            let out = commands::cmd_analyze(&config)?;
            report(&out.stage);
            println!("{}", serde_json::to_string_pretty(&out.summary).expect("summary serializes"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
