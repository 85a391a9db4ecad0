use buzzlab::config::ExperimentConfig;
use buzzlab::{runner, Error};
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "buzzlab", about = "Adversarial-robustness laboratory", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the undefended target and every configured defense variant
    Train(CommonArgs),
    /// Run attack campaigns against the trained targets
    Attack(CommonArgs),
    /// Aggregate campaign results into the comparison report
    Report(CommonArgs),
    /// Render decision-region maps
    Map(CommonArgs),
    /// Small deterministic end-to-end run plus invariant probes
    Selfcheck(CommonArgs),
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Experiment configuration file
    #[arg(long)]
    config: PathBuf,
    /// Override the configured seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load(args: &CommonArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::from_file(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train(a) => runner::cmd_train(&load(&a)?),
        Command::Attack(a) => runner::cmd_attack(&load(&a)?),
        Command::Report(a) => runner::cmd_report(&load(&a)?),
        Command::Map(a) => runner::cmd_map(&load(&a)?),
        Command::Selfcheck(a) => runner::cmd_selfcheck(&load(&a)?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {}", e);
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(3)
        }
    }
}
