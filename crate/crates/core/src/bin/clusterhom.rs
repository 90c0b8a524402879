use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use clusterhom::experiment::{self, ExperimentConfig};
use clusterhom::Error;

/// Cluster-expansion experiments on random two-phase media.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its JSON report and CSV tables.
    Run {
        config: PathBuf,
        /// Override the output directory of the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the worker count of the config.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Check a config and print it with all defaults resolved.
    Validate { config: PathBuf },
    /// Print the per-sample seed table.
    Seeds { config: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32, Error> {
    match cmd {
        Command::Run {
            config,
            out,
            workers,
        } => {
            let mut c = ExperimentConfig::load(&config)?;
            if let Some(dir) = out {
                c.output.dir = dir;
            }
            if let Some(w) = workers {
                c.workers = w;
            }
            let (report, files) = experiment::run(&c)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            for check in &report.checks {
                let status = match (check.asserted, check.passed) {
                    (false, _) => "INFO",
                    (true, true) => "PASS",
                    (true, false) => "FAIL",
                };
                println!(
                    "{status} {} = {:.6e} ({})",
                    check.name, check.value, check.band
                );
            }
            for f in &files {
                println!("wrote {}", f.display());
            }
            Ok(report.exit_code())
        }
        Command::Validate { config } => {
            let v = experiment::validate(&ExperimentConfig::load(&config)?)?;
            for w in &v.warnings {
                eprintln!("warning: {w}");
            }
            println!("{}", serde_json::to_string_pretty(&v.config)?);
            Ok(0)
        }
        Command::Seeds { config } => {
            let v = experiment::validate(&ExperimentConfig::load(&config)?)?;
            println!("index,points,marks");
            for s in experiment::seed_table(&v.config) {
                println!("{},{},{}", s.index, s.points, s.marks);
            }
            Ok(0)
        }
    }
}
