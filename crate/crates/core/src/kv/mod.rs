//! The replicated-log variant: dispersal integrated with Raft-style log
//! replication backing an in-memory key-value store.
//!
//! The leader disseminates each entry's fragments at one of three tiers
//! (`(N, 1)`, `(⌈3N/4⌉, 2)`, `(F+1, F+1)`), stepping down a tier per
//! timeout. Followers keep fragments only and prune entries up to the
//! piggybacked thresholds `T2` and `T1` to one and two fragments. Leader
//! changes are scripted: the most up-to-date survivor reconstructs its log
//! from the cluster, re-disseminates it and appends a no-op.

mod cluster;
mod command;
mod harness;
mod node;
mod tier;

use std::fmt;

use thiserror::Error;

use crate::codec::{Codec, CodecError, CodingParams};
use crate::protocol::NodeId;

pub use cluster::{ClusterSettings, KvCluster, Notice};
pub use command::{KvCommand, KvStore, PUT_OVERHEAD};
pub use harness::{crash_recovery, run_replicated_log, CrashRecoveryConfig, CrashRecoveryReport};
pub use node::{
    AppendEntries, AppendResponse, KvBody, KvMessage, LeaderState, LogSlot, Output, RaftNode,
    TaggedFragment, Threshold, WireEntry, CATCH_UP_BATCH,
};
pub use tier::{three_quarters, Tier, TierTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Term(pub u64);

/// 1-based log position; 0 stands for the empty prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct LogIndex(pub u64);

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for LogIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KvError {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("malformed command: {0}")]
    Malformed(String),
    #[error("{0} is not the leader")]
    NotLeader(NodeId),
    #[error("entry {index} unavailable: {have} distinct fragments reachable, need {need}")]
    Unavailable {
        index: LogIndex,
        have: usize,
        need: usize,
    },
    #[error("{node} would truncate committed entry {index} (commit index {commit})")]
    CommittedTruncation {
        node: NodeId,
        index: LogIndex,
        commit: LogIndex,
    },
    #[error("election stalled: {reachable} reachable nodes, need {needed}")]
    ElectionStall { reachable: usize, needed: usize },
}

/// Cluster shape and behaviour shared by every node.
#[derive(Debug, Clone)]
pub struct KvParams {
    coding: CodingParams,
    delta: usize,
    tiers: TierTable,
    codec: Codec,
    /// Prune on every append instead of in the background.
    pub eager_prune: bool,
}

impl KvParams {
    pub fn new(
        n_nodes: usize,
        max_faults: usize,
        delta: usize,
        eager_prune: bool,
    ) -> Result<Self, KvError> {
        let coding = CodingParams::new(n_nodes, max_faults)?;
        Ok(Self {
            codec: Codec::new(&coding)?,
            coding,
            delta,
            tiers: TierTable::new(n_nodes, max_faults),
            eager_prune,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.coding.n_nodes()
    }

    pub fn max_faults(&self) -> usize {
        self.coding.max_faults()
    }

    pub fn delta(&self) -> usize {
        self.delta
    }

    pub fn tiers(&self) -> &TierTable {
        &self.tiers
    }

    pub fn codec(&self) -> &Codec {
        &self.codec
    }
}
