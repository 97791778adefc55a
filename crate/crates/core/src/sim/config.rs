use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use super::SimError;
use crate::protocol::{ClusterConfig, PruneRule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Protocol {
    Eaid,
    FullFallback,
    Resharing,
    Proactive,
    EaidKv,
}

impl Protocol {
    pub const ALL: [Protocol; 5] = [
        Protocol::Eaid,
        Protocol::FullFallback,
        Protocol::Resharing,
        Protocol::Proactive,
        Protocol::EaidKv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Eaid => "eaid",
            Protocol::FullFallback => "full_fallback",
            Protocol::Resharing => "resharing",
            Protocol::Proactive => "proactive",
            Protocol::EaidKv => "eaid_kv",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown protocol `{s}`"))
    }
}

/// Round-trip times drawn from `Normal(mean, stddev)`, floored at
/// [`LatencyModel::FLOOR_MS`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyModel {
    pub mean_ms: f64,
    pub stddev_ms: f64,
}

impl LatencyModel {
    pub const FLOOR_MS: f64 = 0.05;
}

/// Nodes that drop every message to or from them for entries
/// `[start_entry, end_entry)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionSpec {
    pub nodes: Vec<usize>,
    pub start_entry: u64,
    pub end_entry: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrashTarget {
    Node(usize),
    /// Whoever leads when the crash fires (replicated-log runs only).
    Leader,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CrashSpec {
    pub target: CrashTarget,
    pub entry: u64,
    pub recover_entry: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub n_nodes: usize,
    pub max_faults: usize,
    pub delta: usize,
    pub protocol: Protocol,
    pub num_entries: u64,
    pub message_size_bytes: u32,
    pub latency: LatencyModel,
    pub timeout_ms: f64,
    pub partitions: Vec<PartitionSpec>,
    pub seed: u64,
    pub crash_schedule: Vec<CrashSpec>,
    /// Time between consecutive entry starts.
    pub entry_interval_ms: f64,
    /// Heartbeat period of the replicated-log leader.
    pub heartbeat_ms: f64,
    pub prune_rule: PruneRule,
}

impl ScenarioConfig {
    /// Defaults for everything but the cluster shape and protocol.
    pub fn new(n_nodes: usize, max_faults: usize, protocol: Protocol) -> Self {
        Self {
            n_nodes,
            max_faults,
            delta: 1,
            protocol,
            num_entries: 100,
            message_size_bytes: 3000,
            latency: LatencyModel {
                mean_ms: 0.8,
                stddev_ms: 0.15,
            },
            timeout_ms: 1.1,
            partitions: Vec::new(),
            seed: 0,
            crash_schedule: Vec::new(),
            entry_interval_ms: 5.0,
            heartbeat_ms: 2.0,
            prune_rule: PruneRule::Standard,
        }
    }

    pub fn cluster(&self) -> Result<ClusterConfig, SimError> {
        ClusterConfig::new(self.n_nodes, self.max_faults, self.delta)
            .map_err(|e| SimError::invalid("n_nodes", e.to_string()))
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.cluster()?;
        if self.num_entries == 0 {
            return Err(SimError::invalid("num_entries", "must be at least 1"));
        }
        if self.message_size_bytes == 0 {
            return Err(SimError::invalid(
                "message_size_bytes",
                "must be at least 1",
            ));
        }
        positive("timeout_ms", self.timeout_ms)?;
        positive("entry_interval_ms", self.entry_interval_ms)?;
        positive("heartbeat_ms", self.heartbeat_ms)?;
        if !(self.latency.mean_ms.is_finite() && self.latency.mean_ms >= 0.0) {
            return Err(SimError::invalid(
                "latency.mean_ms",
                "must be finite and non-negative",
            ));
        }
        if !(self.latency.stddev_ms.is_finite() && self.latency.stddev_ms >= 0.0) {
            return Err(SimError::invalid(
                "latency.stddev_ms",
                "must be finite and non-negative",
            ));
        }
        let mut faulty = BTreeSet::new();
        let mut windows: Vec<Vec<(u64, u64)>> = vec![Vec::new(); self.n_nodes];
        for p in &self.partitions {
            if p.start_entry >= p.end_entry {
                return Err(SimError::invalid(
                    "partitions",
                    "start_entry must precede end_entry",
                ));
            }
            if p.end_entry > self.num_entries {
                return Err(SimError::invalid(
                    "partitions",
                    "end_entry beyond num_entries",
                ));
            }
            if p.nodes.len() > self.max_faults {
                return Err(SimError::invalid(
                    "partitions",
                    "more than max_faults nodes",
                ));
            }
            for &node in &p.nodes {
                self.check_node("partitions", node)?;
                let w = (p.start_entry, p.end_entry);
                if windows[node].iter().any(|&(s, e)| s < w.1 && w.0 < e) {
                    return Err(SimError::invalid(
                        "partitions",
                        format!("overlapping partitions on node {node}"),
                    ));
                }
                windows[node].push(w);
                faulty.insert(node);
            }
        }
        for c in &self.crash_schedule {
            if c.entry >= self.num_entries {
                return Err(SimError::invalid(
                    "crash_schedule",
                    "entry beyond num_entries",
                ));
            }
            if c.recover_entry.is_some_and(|r| r <= c.entry) {
                return Err(SimError::invalid(
                    "crash_schedule",
                    "recover_entry must follow entry",
                ));
            }
            match c.target {
                CrashTarget::Leader => {
                    if self.protocol != Protocol::EaidKv {
                        return Err(SimError::invalid(
                            "crash_schedule",
                            "leader crashes need the replicated-log protocol",
                        ));
                    }
                }
                CrashTarget::Node(node) => {
                    self.check_node("crash_schedule", node)?;
                    faulty.insert(node);
                }
            }
        }
        let permanent_leader_crashes = self
            .crash_schedule
            .iter()
            .filter(|c| c.target == CrashTarget::Leader && c.recover_entry.is_none())
            .count();
        if faulty.len() + permanent_leader_crashes > self.max_faults {
            return Err(SimError::invalid(
                "crash_schedule",
                format!(
                    "{} distinct faulty nodes exceed max_faults = {}",
                    faulty.len() + permanent_leader_crashes,
                    self.max_faults
                ),
            ));
        }
        Ok(())
    }

    fn check_node(&self, field: &'static str, node: usize) -> Result<(), SimError> {
        if node >= self.n_nodes {
            return Err(SimError::invalid(
                field,
                format!("node {node} out of range"),
            ));
        }
        // In dispersal runs node 0 is the leader, which is never faulted.
        if node == 0 && self.protocol != Protocol::EaidKv {
            return Err(SimError::invalid(
                field,
                "node 0 is the leader and cannot be faulted",
            ));
        }
        Ok(())
    }
}

fn positive(field: &'static str, v: f64) -> Result<(), SimError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(SimError::invalid(field, "must be positive"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ScenarioConfig {
        ScenarioConfig::new(5, 2, Protocol::Eaid)
    }

    #[test]
    fn defaults_are_valid() {
        base().validate().unwrap();
    }

    #[test]
    fn rejects_bad_shapes_and_windows() {
        let mut c = base();
        c.n_nodes = 6;
        assert!(c.validate().is_err());

        let mut c = base();
        c.partitions = vec![
            PartitionSpec {
                nodes: vec![1],
                start_entry: 0,
                end_entry: 10,
            },
            PartitionSpec {
                nodes: vec![1],
                start_entry: 5,
                end_entry: 20,
            },
        ];
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("overlapping"), "{err}");

        let mut c = base();
        c.partitions = vec![PartitionSpec {
            nodes: vec![1, 2, 3],
            start_entry: 0,
            end_entry: 10,
        }];
        assert!(c.validate().is_err());

        let mut c = base();
        c.partitions = vec![PartitionSpec {
            nodes: vec![0],
            start_entry: 0,
            end_entry: 10,
        }];
        assert!(c.validate().is_err());
    }

    #[test]
    fn faults_are_capped_at_f() {
        let mut c = base();
        c.partitions = vec![PartitionSpec {
            nodes: vec![1, 2],
            start_entry: 0,
            end_entry: 10,
        }];
        c.crash_schedule = vec![CrashSpec {
            target: CrashTarget::Node(3),
            entry: 50,
            recover_entry: None,
        }];
        assert!(c.validate().is_err());
        c.crash_schedule[0].target = CrashTarget::Node(2);
        c.validate().unwrap();
        c.crash_schedule[0].target = CrashTarget::Leader;
        assert!(c.validate().is_err());
    }

    #[test]
    fn empty_partition_is_allowed() {
        let mut c = base();
        c.partitions = vec![PartitionSpec {
            nodes: vec![],
            start_entry: 0,
            end_entry: 1,
        }];
        c.validate().unwrap();
    }

    #[test]
    fn protocol_names_roundtrip() {
        for p in Protocol::ALL {
            assert_eq!(p.name().parse::<Protocol>().unwrap(), p);
        }
        assert!("raft".parse::<Protocol>().is_err());
    }
}
