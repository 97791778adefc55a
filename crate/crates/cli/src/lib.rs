//! Scenario runner behind the `eaid` binary: parses scenario files, runs
//! them on the simulator and writes CSVs. Every file is written to a
//! temporary sibling and renamed into place, so a failed command leaves no
//! partial output.

pub mod scenario;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use eaid::sim::{self, MetricsRecord, RunOptions, RunOutput, SimError, Summary};
use tempfile::NamedTempFile;
use thiserror::Error;

pub use scenario::{Scenario, ScenarioError, ScenarioRun};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Scenario { path: String, source: ScenarioError },
    #[error("run {key}: {source}")]
    Sim { key: String, source: SimError },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

impl CliError {
    fn io(path: &Path, e: impl ToString) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }
}

/// Loads a scenario file, replacing its seed if one is given.
pub fn load(path: &Path, seed: Option<u64>) -> Result<Scenario, CliError> {
    let s = Scenario::load(path).map_err(|source| CliError::Scenario {
        path: path.display().to_string(),
        source,
    })?;
    Ok(match seed {
        Some(seed) => s.with_seed(seed),
        None => s,
    })
}

/// Runs every scenario run on up to `jobs` threads, returning outputs in run order.
pub fn run_all(
    runs: &[ScenarioRun],
    opts: RunOptions,
    jobs: usize,
) -> Result<Vec<RunOutput>, CliError> {
    let slots: Vec<Mutex<Option<Result<RunOutput, SimError>>>> =
        runs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, runs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(run) = runs.get(i) else { break };
                let out = sim::run(&run.config, opts);
                *slots[i].lock().unwrap() = Some(out);
            });
        }
    });
    runs.iter()
        .zip(slots)
        .map(|(run, slot)| {
            slot.into_inner()
                .unwrap()
                .expect("every run executes")
                .map_err(|source| CliError::Sim {
                    key: run.key.clone(),
                    source,
                })
        })
        .collect()
}

/// Writes `path` through a temporary file in the same directory.
pub fn write_atomic(
    path: &Path,
    fill: impl FnOnce(&mut dyn Write) -> Result<(), CliError>,
) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = NamedTempFile::new_in(&dir).map_err(|e| CliError::io(&dir, e))?;
    fill(tmp.as_file_mut())?;
    tmp.as_file_mut()
        .flush()
        .map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

fn csv_body<'a>(
    path: &'a Path,
    records: &'a [MetricsRecord],
) -> impl FnOnce(&mut dyn Write) -> Result<(), CliError> + 'a {
    move |w| sim::write_csv(w, records).map_err(|e| CliError::io(path, e))
}

/// One summary line per run.
pub fn summary_line(key: &str, records: &[MetricsRecord]) -> String {
    match Summary::of(records) {
        Some(s) => format!("{key}: {s}"),
        None => format!("{key}: no entries"),
    }
}

/// `run`: executes every run and writes their records, concatenated in key
/// order, to one CSV. Returns the summary lines.
pub fn cmd_run(
    scenario: &Scenario,
    out: &Path,
    trace: Option<&Path>,
    jobs: usize,
) -> Result<Vec<String>, CliError> {
    let opts = RunOptions {
        trace: trace.is_some(),
        verify: false,
    };
    let outputs = run_all(&scenario.runs, opts, jobs)?;
    let records: Vec<MetricsRecord> = outputs.iter().flat_map(|o| o.records.clone()).collect();
    if let Some(path) = trace {
        let multi = scenario.runs.len() > 1;
        write_atomic(path, |w| {
            for (run, o) in scenario.runs.iter().zip(&outputs) {
                if multi {
                    writeln!(w, "# {}", run.key).map_err(|e| CliError::io(path, e))?;
                }
                for line in &o.trace {
                    writeln!(w, "{line}").map_err(|e| CliError::io(path, e))?;
                }
            }
            Ok(())
        })?;
    }
    write_atomic(out, csv_body(out, &records))?;
    Ok(scenario
        .runs
        .iter()
        .zip(&outputs)
        .map(|(run, o)| summary_line(&run.key, &o.records))
        .collect())
}

/// Result of a verifying run.
#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    Clean {
        keys: Vec<String>,
    },
    Violated {
        key: String,
        violation: eaid::sim::Violation,
        /// Trace lines up to the violation.
        trace: Vec<String>,
    },
}

/// `verify`: runs each run with the exhaustive checks on; stops at the
/// first violation.
pub fn cmd_verify(scenario: &Scenario) -> Result<Verdict, CliError> {
    let opts = RunOptions {
        trace: true,
        verify: true,
    };
    let mut keys = Vec::with_capacity(scenario.runs.len());
    for run in &scenario.runs {
        let out = sim::run(&run.config, opts).map_err(|source| CliError::Sim {
            key: run.key.clone(),
            source,
        })?;
        if let Some(violation) = out.violation {
            return Ok(Verdict::Violated {
                key: run.key.clone(),
                violation,
                trace: out.trace,
            });
        }
        keys.push(run.key.clone());
    }
    Ok(Verdict::Clean { keys })
}

/// Name of the sweep's merged summary file.
pub const SUMMARY_FILE: &str = "summary.csv";

/// `sweep`: writes `<key>.csv` per run and a `summary.csv` with one row
/// per run, sorted by key.
pub fn cmd_sweep(
    scenario: &Scenario,
    out_dir: &Path,
    jobs: usize,
) -> Result<Vec<String>, CliError> {
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let outputs = run_all(&scenario.runs, RunOptions::default(), jobs)?;
    for (run, o) in scenario.runs.iter().zip(&outputs) {
        let path = out_dir.join(format!("{}.csv", run.key));
        write_atomic(&path, csv_body(&path, &o.records))?;
    }
    let summary = out_dir.join(SUMMARY_FILE);
    write_atomic(&summary, |w| {
        let mut csv = String::from(
            "key,protocol,n_nodes,max_faults,entries,mean_latency_ms,retransmission_pct,multi_retransmission_pct,final_total_storage_bytes\n",
        );
        for (run, o) in scenario.runs.iter().zip(&outputs) {
            let c = &run.config;
            if let Some(s) = Summary::of(&o.records) {
                csv.push_str(&format!(
                    "{},{},{},{},{},{:.6},{:.3},{:.3},{}\n",
                    run.key,
                    c.protocol,
                    c.n_nodes,
                    c.max_faults,
                    s.entries,
                    s.mean_latency_ms,
                    s.retransmission_fraction * 100.0,
                    s.multi_retransmission_fraction * 100.0,
                    s.final_total_storage_bytes
                ));
            }
        }
        w.write_all(csv.as_bytes())
            .map_err(|e| CliError::io(&summary, e))
    })?;
    Ok(scenario
        .runs
        .iter()
        .zip(&outputs)
        .map(|(run, o)| summary_line(&run.key, &o.records))
        .collect())
}
