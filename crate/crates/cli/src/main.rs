use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use screening_cli::{cmd_drift, cmd_evaluate, cmd_generate, cmd_iv, cmd_report, cmd_run, error_line, parse_seeds, RunConfig};

#[derive(Parser)]
#[command(name = "screening", version, about = "Simulate and evaluate exploration-based interview screening")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Log progress and refit warnings.
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Base directory for the run directory; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seeds to run instead of the config seed: `3`, `1,2,5`, `0..10` or `0..=9`.
    #[arg(long)]
    seeds: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write applicant populations and screener panels.
    Generate(ConfigArgs),
    /// Run the policy experiment and write logs and checkpoints.
    Run(ConfigArgs),
    /// IPW, support, agreement, composition and time-series reports for a run directory.
    Evaluate {
        /// Directory written by `run`.
        run_dir: PathBuf,
    },
    /// Leniency instrument, balance, complier and monotonicity reports.
    Iv {
        #[command(flatten)]
        args: ConfigArgs,
        /// Analyze this population file instead of generating one.
        #[arg(long)]
        population: Option<PathBuf>,
    },
    /// Outcome drift run with cohort replay over saved model states.
    Drift(ConfigArgs),
    /// Seed-level aggregates of a run directory.
    Report {
        run_dir: PathBuf,
    },
}

fn load(args: &ConfigArgs) -> anyhow::Result<(RunConfig, Vec<u64>)> {
    let cfg = RunConfig::load(&args.config)?;
    let seeds = match &args.seeds {
        Some(s) => parse_seeds(s)?,
        None => vec![cfg.seed],
    };
    Ok((cfg, seeds))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let dir = match cli.command {
        Command::Generate(a) => {
            let (cfg, seeds) = load(&a)?;
            cmd_generate(&cfg, a.out.as_deref(), &seeds)?
        }
        Command::Run(a) => {
            let (cfg, seeds) = load(&a)?;
            cmd_run(&cfg, a.out.as_deref(), &seeds)?
        }
        Command::Evaluate { run_dir } => cmd_evaluate(&run_dir)?,
        Command::Iv { args, population } => {
            let (cfg, seeds) = load(&args)?;
            cmd_iv(&cfg, population.as_deref(), args.out.as_deref(), &seeds)?
        }
        Command::Drift(a) => {
            let (cfg, seeds) = load(&a)?;
            cmd_drift(&cfg, a.out.as_deref(), &seeds)?
        }
        Command::Report { run_dir } => {
            let (dir, text) = cmd_report(&run_dir)?;
            print!("{text}");
            dir
        }
    };
    println!("{}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
