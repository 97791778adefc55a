//! eAID dispersal: the leader state machine and storage nodes with
//! autonomous pruning.
//!
//! State machines are plain values driven by one event at a time. Every
//! handler returns the messages to send; routing, timers and clocks belong to
//! the caller.

mod leader;
mod message;
mod shard;
mod storage;

use std::fmt;

use thiserror::Error;

use crate::codec::{CodecError, CodingParams, MessageId};

pub use leader::{Completion, DispersalLeader, EaidLeader, Reaction, Scheme, TimerAction};
pub use message::{Body, ProtocolMessage, ShardList};
pub use shard::{EncodedMessage, Payload, Shard, ShardTag, SizedMessage};
pub use storage::{PruneRule, StorageNode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct NodeId(pub usize);

impl NodeId {
    /// The dispersing leader is colocated with storage node 0.
    pub const LEADER: NodeId = NodeId(0);
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("invalid cluster configuration: {0}")]
    Config(String),
    #[error("dispersal of message {0} already started")]
    DuplicateDispersal(MessageId),
    #[error("node {node} received fragment {index} outside its block")]
    OutsideBlock { node: NodeId, index: usize },
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Cluster shape plus the conservativeness margin `δ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClusterConfig {
    params: CodingParams,
    delta: usize,
}

impl ClusterConfig {
    pub fn new(n_nodes: usize, max_faults: usize, delta: usize) -> Result<Self, ProtocolError> {
        let params = CodingParams::new(n_nodes, max_faults)
            .map_err(|e| ProtocolError::Config(e.to_string()))?;
        Ok(Self { params, delta })
    }

    pub fn n_nodes(&self) -> usize {
        self.params.n_nodes()
    }

    pub fn max_faults(&self) -> usize {
        self.params.max_faults()
    }

    pub fn delta(&self) -> usize {
        self.delta
    }

    pub fn params(&self) -> &CodingParams {
        &self.params
    }
}

/// `⌈(F+1)/t'⌉`: fragments each node needs so that any `t'` of them cover `F+1`.
pub fn fragments_per_node(max_faults: usize, t_prime: usize) -> usize {
    (max_faults + 1).div_ceil(t_prime.max(1))
}

/// `r(q) = ⌈(F+1)/(q−F)⌉`, the fragments a node keeps once `q` nodes are known
/// to hold theirs. Undefined (`None`) for `q ≤ F`.
pub fn retained_fragments(max_faults: usize, quorum: usize) -> Option<usize> {
    (quorum > max_faults).then(|| (max_faults + 1).div_ceil(quorum - max_faults))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn retained_fragments_examples() {
        assert_eq!(retained_fragments(5, 11), Some(1));
        assert_eq!(retained_fragments(5, 9), Some(2));
        assert_eq!(retained_fragments(2, 3), Some(3));
        assert_eq!(retained_fragments(2, 2), None);
    }

    #[test]
    fn retained_fragments_non_increasing() {
        for f in 1..=10 {
            let mut prev = usize::MAX;
            for q in (f + 1)..=(4 * f + 2) {
                let r = retained_fragments(f, q).unwrap();
                assert!(r <= prev, "F={f} q={q}");
                prev = r;
            }
        }
    }

    #[test]
    fn config_requires_two_f_plus_one() {
        assert!(ClusterConfig::new(5, 2, 1).is_ok());
        assert!(matches!(
            ClusterConfig::new(6, 2, 1),
            Err(ProtocolError::Config(_))
        ));
    }
}
