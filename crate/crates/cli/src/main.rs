use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use seta_cli::{CliError, ExperimentConfig, Method, RunSummary};

#[derive(Parser)]
#[command(name = "seta", version, about = "Sparse-expert continual learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides output.dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides training.seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the expert learner over the task stream.
    Run(RunArgs),
    /// Train a single-delta baseline on the same stream.
    Baseline {
        #[command(flatten)]
        args: RunArgs,
        #[arg(long, value_enum)]
        method: Method,
    },
    /// Recompute the published metrics from the reference tables.
    VerifyFixtures {
        /// Directory of fixture CSVs; the bundled copies by default.
        #[arg(long)]
        fixtures: Option<PathBuf>,
    },
    /// Summaries and plot-ready tables for a finished run.
    Report {
        run_dir: PathBuf,
        /// Where to write the tables; the run directory by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(args: &RunArgs) -> Result<(ExperimentConfig, PathBuf), CliError> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg = cfg.with_seed(seed);
    }
    let out = args.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    Ok((cfg, out))
}

fn print_run(s: &RunSummary) {
    println!("{} finished {} tasks; artifacts in {}", s.method, s.tasks, s.out_dir.display());
    if let Some(m) = &s.metrics {
        println!("retention {:.2}", m.retention);
        if let Some(f) = m.forgetting {
            println!("forgetting {f:.2}");
        }
    }
}

fn dispatch(command: Command) -> Result<u8, CliError> {
    match command {
        Command::Run(args) => {
            let (cfg, out) = load(&args)?;
            print_run(&seta_cli::run(&cfg, &out)?);
        }
        Command::Baseline { args, method } => {
            let (cfg, out) = load(&args)?;
            print_run(&seta_cli::baseline(&cfg, method, &out)?);
        }
        Command::VerifyFixtures { fixtures } => {
            let checks = seta_cli::verify_fixtures(fixtures.as_deref())?;
            for c in &checks {
                println!("{c}");
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            println!("{} checks, {failed} failed", checks.len());
            if failed > 0 {
                return Ok(seta_cli::EXIT_FAILURE);
            }
        }
        Command::Report { run_dir, out } => {
            let out = out.unwrap_or_else(|| run_dir.clone());
            let r = seta_cli::report(&run_dir, &out)?;
            print!("{}", r.text);
            println!("wrote {} to {}", r.files.join(", "), r.out_dir.display());
        }
    }
    Ok(seta_cli::EXIT_OK)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
