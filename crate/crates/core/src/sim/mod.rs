//! Deterministic discrete-event simulation of dispersal runs.
//!
//! Virtual time is kept in integer nanoseconds. Entry `i` starts at
//! `i · entry_interval_ms`; each leader-to-node data message draws one round
//! trip from the node's latency stream and the node's ack arrives at the end
//! of it. Partitioned or crashed nodes drop messages at delivery.

mod check;
mod config;
mod engine;
mod metrics;
pub mod rng;

use rand::RngCore;
use thiserror::Error;

use crate::baselines::{FullFallback, Proactive, Resharing};
use crate::codec::MAX_TOTAL_SHARDS;
use crate::protocol::{
    DispersalLeader, EaidLeader, EncodedMessage, Payload, ProtocolError, SizedMessage,
};

pub use check::{tolerates_failures, Holding, VERIFY_MAX_NODES};
pub use config::{CrashSpec, CrashTarget, LatencyModel, PartitionSpec, Protocol, ScenarioConfig};
pub use metrics::{write_csv, MetricsRecord, Summary, CSV_COLUMNS};

use engine::DispersalSim;
use rng::{fill_bytes, stream, Purpose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("entry {entry} not complete after {rounds} timeout rounds")]
    NoProgress { entry: u64, rounds: u32 },
    #[error("exhaustive verification supports at most {max} nodes, scenario has {n_nodes}")]
    TooLargeToVerify { n_nodes: usize, max: usize },
    #[error("replicated log: {0}")]
    Kv(String),
    #[error("csv: {0}")]
    Csv(String),
    #[error("io: {0}")]
    Io(String),
}

impl SimError {
    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        SimError::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }

    fn csv(e: csv::Error) -> Self {
        SimError::Csv(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Record a textual event trace.
    pub trace: bool,
    /// Run the exhaustive reconstructability checks after every event.
    pub verify: bool,
}

/// The first broken invariant seen by a verifying run.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub time_ms: f64,
    pub entry: u64,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "at {:.6} ms, entry {}: {}",
            self.time_ms, self.entry, self.message
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub records: Vec<MetricsRecord>,
    pub trace: Vec<String>,
    pub violation: Option<Violation>,
}

/// Runs a scenario and returns one record per entry.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<Vec<MetricsRecord>, SimError> {
    Ok(run(cfg, RunOptions::default())?.records)
}

pub fn run(cfg: &ScenarioConfig, opts: RunOptions) -> Result<RunOutput, SimError> {
    cfg.validate()?;
    if opts.verify && cfg.n_nodes > VERIFY_MAX_NODES {
        return Err(SimError::TooLargeToVerify {
            n_nodes: cfg.n_nodes,
            max: VERIFY_MAX_NODES,
        });
    }
    if cfg.protocol == Protocol::EaidKv {
        return crate::kv::run_replicated_log(cfg, opts);
    }
    if codes_fit_field(cfg) {
        let mut rng = stream(cfg.seed, 0, Purpose::Payload);
        let len = cfg.message_size_bytes as usize;
        dispatch(cfg, opts, move |_| {
            EncodedMessage::new(fill_bytes(&mut rng, len))
        })
    } else {
        let len = cfg.message_size_bytes;
        dispatch(cfg, opts, move |_| SizedMessage { len })
    }
}

/// Whether every code the run uses fits GF(256); wider runs carry size-only
/// shards with identical byte accounting.
pub fn codes_fit_field(cfg: &ScenarioConfig) -> bool {
    (cfg.max_faults + 1) * cfg.n_nodes <= MAX_TOTAL_SHARDS
}

fn dispatch<P, F>(cfg: &ScenarioConfig, opts: RunOptions, make: F) -> Result<RunOutput, SimError>
where
    P: Payload,
    F: FnMut(u64) -> P,
{
    let cluster = cfg.cluster()?;
    match cfg.protocol {
        Protocol::Eaid => simulate(cfg, opts, EaidLeader::new(cluster, cfg.prune_rule), make),
        Protocol::FullFallback => simulate(cfg, opts, FullFallback::new(cluster), make),
        Protocol::Resharing => {
            let seed = stream(cfg.seed, 0, Purpose::Leader).next_u64();
            simulate(cfg, opts, Resharing::new(cluster, seed), make)
        }
        Protocol::Proactive => simulate(cfg, opts, Proactive::new(cluster), make),
        Protocol::EaidKv => unreachable!("handled by the replicated-log driver"),
    }
}

fn simulate<L, F>(
    cfg: &ScenarioConfig,
    opts: RunOptions,
    leader: L,
    make: F,
) -> Result<RunOutput, SimError>
where
    L: DispersalLeader,
    F: FnMut(u64) -> L::Payload,
{
    DispersalSim::new(cfg, opts, leader, make).run()
}
