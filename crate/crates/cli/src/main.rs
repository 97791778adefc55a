use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use eaid_cli::{cmd_run, cmd_sweep, cmd_verify, load, CliError, Verdict};

/// Trace lines shown before a violation.
const TRACE_TAIL: usize = 40;

#[derive(Parser)]
#[command(
    name = "eaid",
    version,
    about = "Run dispersal scenarios on the deterministic simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    scenario: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long, env = "EAID_SEED")]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its records as one CSV.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Also write the event trace.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Independent runs to execute concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run with exhaustive reconstructability checks after every event.
    Verify {
        #[command(flatten)]
        common: Common,
    },
    /// Write one CSV per run plus a summary into a directory.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

fn execute(cli: Cli) -> Result<ExitCode, CliError> {
    match cli.command {
        Command::Run {
            common,
            out,
            trace,
            jobs,
        } => {
            let s = load(&common.scenario, common.seed)?;
            for line in cmd_run(&s, &out, trace.as_deref(), jobs)? {
                println!("{line}");
            }
        }
        Command::Verify { common } => {
            let s = load(&common.scenario, common.seed)?;
            match cmd_verify(&s)? {
                Verdict::Clean { keys } => {
                    for k in keys {
                        println!("{k}: no violations");
                    }
                }
                Verdict::Violated {
                    key,
                    violation,
                    trace,
                } => {
                    eprintln!("{key}: violation {violation}");
                    for line in &trace[trace.len().saturating_sub(TRACE_TAIL)..] {
                        eprintln!("  {line}");
                    }
                    return Ok(ExitCode::FAILURE);
                }
            }
        }
        Command::Sweep {
            common,
            out_dir,
            jobs,
        } => {
            let s = load(&common.scenario, common.seed)?;
            for line in cmd_sweep(&s, &out_dir, jobs)? {
                println!("{line}");
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
