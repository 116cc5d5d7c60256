use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gaugegeom::scenario::{self, RunError};

#[derive(Parser)]
#[command(
    name = "gaugegeom",
    version,
    about = "Run isospectral-geometry and latent-twin scenarios"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate and run a scenario file.
    Run {
        scenario: PathBuf,
        /// Replace the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Directory that relative output paths are resolved against.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Do not print the run record.
        #[arg(long)]
        quiet: bool,
    },
    /// Validate a scenario file without running it.
    Validate { scenario: PathBuf },
    /// Print the shipped scenario templates, or one of them by command name.
    Templates { name: Option<String> },
}

fn read(path: &Path) -> Result<Vec<u8>, RunError> {
    std::fs::read(path).map_err(|e| RunError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn fail(e: RunError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            scenario: path,
            seed,
            out,
            quiet,
        } => {
            let parsed =
                read(&path).and_then(|text| scenario::parse_scenario_with_seed(&text, seed).map_err(RunError::from));
            let s = match parsed {
                Ok(s) => s,
                Err(e) => return fail(e),
            };
            match scenario::run_scenario(&s, out.as_deref()) {
                Ok(record) => {
                    if !quiet {
                        match serde_json::to_string_pretty(&record) {
                            Ok(text) => println!("{text}"),
                            Err(e) => eprintln!("warning: cannot print run record: {e}"),
                        }
                    }
                    if !record.converged {
                        eprintln!("warning: optimizer did not reach the endpoint tolerance");
                    }
                    ExitCode::from(record.exit_code() as u8)
                }
                Err(e) => fail(e),
            }
        }
        Command::Validate { scenario: path } => {
            match read(&path).and_then(|text| scenario::parse_scenario(&text).map_err(RunError::from)) {
                Ok(s) => {
                    println!("ok: {}", s.job.command());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Templates { name: Some(name) } => match scenario::template(&name) {
            Some(text) => {
                print!("{text}");
                ExitCode::SUCCESS
            }
            None => {
                eprintln!(
                    "error: no template named {name:?}; expected one of {}",
                    scenario::COMMANDS.join(", ")
                );
                ExitCode::from(2)
            }
        },
        Command::Templates { name: None } => {
            for (name, text) in scenario::TEMPLATES {
                println!("== {name}");
                print!("{text}");
            }
            ExitCode::SUCCESS
        }
    }
}
