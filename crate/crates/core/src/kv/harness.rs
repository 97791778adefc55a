//! Drivers for the replicated log: scenario runs producing metrics, and a
//! randomized crash-recovery check against a sequential oracle.

use std::collections::BTreeMap;

use rand::Rng;

use super::cluster::{replay, ClusterSettings, Fault, KvCluster, Notice};
use super::command::{KvCommand, PUT_OVERHEAD};
use super::{KvError, LogIndex, Term};
use crate::protocol::NodeId;
use crate::sim::rng::{fill_bytes, ms_to_ns, ns_to_ms, stream, Purpose};
use crate::sim::{
    codes_fit_field, CrashTarget, LatencyModel, MetricsRecord, RunOptions, RunOutput,
    ScenarioConfig, SimError, Violation,
};

impl From<KvError> for SimError {
    fn from(e: KvError) -> Self {
        SimError::Kv(e.to_string())
    }
}

/// Heartbeats of quiet time after the last commit before a run ends.
const SETTLE_HEARTBEATS: u64 = 10;
/// Virtual time allowed past the last submission for everything to commit.
const DEADLINE_MS: f64 = 60_000.0;
/// Election timeout in heartbeat periods.
const ELECTION_HEARTBEATS: f64 = 5.0;

/// Client-side bookkeeping: where each command sits and when it finished.
struct Client {
    commands: Vec<KvCommand>,
    submitted: Vec<Option<u64>>,
    position: Vec<Option<(Term, LogIndex)>>,
    dispersed: Vec<Option<u64>>,
    rounds: Vec<u32>,
    committed: Vec<Option<u64>>,
    by_position: BTreeMap<(Term, LogIndex), usize>,
    waiting: Vec<usize>,
    done: usize,
}

impl Client {
    fn new(commands: Vec<KvCommand>) -> Self {
        let n = commands.len();
        Self {
            commands,
            submitted: vec![None; n],
            position: vec![None; n],
            dispersed: vec![None; n],
            rounds: vec![0; n],
            committed: vec![None; n],
            by_position: BTreeMap::new(),
            waiting: Vec::new(),
            done: 0,
        }
    }

    fn all_committed(&self) -> bool {
        self.done == self.commands.len()
    }

    fn submit(&mut self, k: usize, c: &mut KvCluster) -> Result<(), KvError> {
        self.submitted[k].get_or_insert(c.now_ns());
        match c.submit(self.commands[k].clone())? {
            Some(pos) => {
                if let Some(old) = self.position[k].replace(pos) {
                    self.by_position.remove(&old);
                }
                self.by_position.insert(pos, k);
            }
            None => self.waiting.push(k),
        }
        Ok(())
    }

    /// Handles client-relevant notices. Returns the first violation.
    fn observe(
        &mut self,
        notices: &[Notice],
        c: &mut KvCluster,
    ) -> Result<Option<String>, KvError> {
        let now = c.now_ns();
        for n in notices {
            match *n {
                Notice::Dispersed {
                    term,
                    index,
                    rounds,
                    ..
                } => {
                    if let Some(&k) = self.by_position.get(&(term, index)) {
                        if self.committed[k].is_none() {
                            self.dispersed[k] = Some(now);
                            self.rounds[k] = rounds;
                        }
                    }
                }
                Notice::Committed { term, index, .. } => {
                    if let Some(&k) = self.by_position.get(&(term, index)) {
                        if self.committed[k].is_none() {
                            self.committed[k] = Some(now);
                            self.dispersed[k].get_or_insert(now);
                            self.done += 1;
                        }
                    }
                }
                Notice::Elected { leader, .. } => self.resubmit(leader, c)?,
                Notice::Violation(ref m) => return Ok(Some(m.clone())),
                Notice::Stalled(_) | Notice::Wake(_) => {}
            }
        }
        Ok(None)
    }

    /// Resubmits commands lost with the old leader's uncommitted suffix.
    fn resubmit(&mut self, leader: NodeId, c: &mut KvCluster) -> Result<(), KvError> {
        let mut lost: Vec<usize> = std::mem::take(&mut self.waiting);
        for k in 0..self.commands.len() {
            if self.committed[k].is_some() {
                continue;
            }
            if let Some((term, index)) = self.position[k] {
                if c.node(leader).term_at(index) != Some(term) {
                    lost.push(k);
                }
            }
        }
        lost.sort_unstable();
        lost.dedup();
        for k in lost {
            self.submit(k, c)?;
        }
        Ok(())
    }
}

fn settings_for(cfg: &ScenarioConfig, opts: RunOptions) -> ClusterSettings {
    ClusterSettings {
        n_nodes: cfg.n_nodes,
        max_faults: cfg.max_faults,
        delta: cfg.delta,
        latency: cfg.latency,
        timeout_ms: cfg.timeout_ms,
        heartbeat_ms: cfg.heartbeat_ms,
        election_timeout_ms: ELECTION_HEARTBEATS * cfg.heartbeat_ms,
        prune_interval_ms: None,
        seed: cfg.seed,
        audit: opts.verify,
        trace: opts.trace,
    }
}

/// Driver wake-ups, encoded into cluster wake tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Wake {
    Submit(u64),
    WindowEnd(u64),
    CrashLeader { spec: usize },
}

impl Wake {
    fn tag(self) -> u64 {
        match self {
            Wake::Submit(i) => i << 2,
            Wake::WindowEnd(i) => i << 2 | 1,
            Wake::CrashLeader { spec } => (spec as u64) << 2 | 2,
        }
    }

    fn from_tag(tag: u64) -> Self {
        match tag & 3 {
            0 => Wake::Submit(tag >> 2),
            1 => Wake::WindowEnd(tag >> 2),
            _ => Wake::CrashLeader {
                spec: (tag >> 2) as usize,
            },
        }
    }
}

/// Runs a scenario on the replicated log with one `Put` per entry.
pub fn run_replicated_log(cfg: &ScenarioConfig, opts: RunOptions) -> Result<RunOutput, SimError> {
    if !codes_fit_field(cfg) {
        return Err(SimError::invalid(
            "n_nodes",
            "replicated-log runs carry real fragments, so (max_faults+1)·n_nodes must not exceed 256",
        ));
    }
    let mut c = KvCluster::new(settings_for(cfg, opts))?;
    let mut payload = stream(cfg.seed, 0, Purpose::Payload);
    let value_len = (cfg.message_size_bytes as usize).saturating_sub(PUT_OVERHEAD + 8);
    let commands = (0..cfg.num_entries)
        .map(|i| {
            KvCommand::put(
                i.to_be_bytes().to_vec(),
                fill_bytes(&mut payload, value_len),
            )
        })
        .collect();
    let mut client = Client::new(commands);
    let interval = ms_to_ns(cfg.entry_interval_ms);
    let at = |entry: u64| entry * interval;
    for i in 0..cfg.num_entries {
        c.wake_at(at(i), Wake::Submit(i).tag());
        c.wake_at(at(i + 1), Wake::WindowEnd(i).tag());
    }
    for p in &cfg.partitions {
        for &j in &p.nodes {
            c.fault_at(at(p.start_entry), Fault::Isolate(j));
            c.fault_at(at(p.end_entry), Fault::Heal(j));
        }
    }
    let mut restarts: Vec<Option<u64>> = Vec::new();
    for (s, spec) in cfg.crash_schedule.iter().enumerate() {
        match spec.target {
            CrashTarget::Node(j) => {
                c.fault_at(at(spec.entry), Fault::Crash(j));
                if let Some(r) = spec.recover_entry {
                    c.fault_at(at(r), Fault::Restart(j));
                }
            }
            CrashTarget::Leader => c.wake_at(at(spec.entry), Wake::CrashLeader { spec: s }.tag()),
        }
        restarts.push(spec.recover_entry.map(at));
    }

    let n = cfg.num_entries as usize;
    let mut windows = vec![(0u64, 0u64); n];
    let last_event = at(cfg.num_entries);
    let deadline = last_event + ms_to_ns(DEADLINE_MS);
    let settle = SETTLE_HEARTBEATS * ms_to_ns(cfg.heartbeat_ms);
    let mut quiet_since: Option<u64> = None;
    let mut violation = None;
    while let Some(notices) = c.step()? {
        for note in &notices {
            if let Notice::Wake(tag) = *note {
                match Wake::from_tag(tag) {
                    Wake::Submit(i) => client.submit(i as usize, &mut c)?,
                    Wake::WindowEnd(i) => windows[i as usize] = c.live_storage(),
                    Wake::CrashLeader { spec } => {
                        if let Some(l) = c.leader() {
                            c.fault_at(c.now_ns(), Fault::Crash(l.0));
                            if let Some(r) = restarts[spec] {
                                c.fault_at(r, Fault::Restart(l.0));
                            }
                        }
                    }
                }
            }
        }
        if let Some(m) = client.observe(&notices, &mut c)? {
            violation = Some(Violation {
                time_ms: c.now_ms(),
                entry: 0,
                message: m,
            });
            break;
        }
        let now = c.now_ns();
        if client.all_committed() && now >= last_event {
            let since = *quiet_since.get_or_insert(now);
            if now >= since + settle {
                break;
            }
        }
        if now > deadline {
            let entry = client
                .committed
                .iter()
                .position(Option::is_none)
                .unwrap_or(0);
            return Err(SimError::NoProgress {
                entry: entry as u64,
                rounds: client.rounds[entry],
            });
        }
    }

    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let begin = client.submitted[i].unwrap_or(0);
        let done = match client.dispersed[i] {
            Some(d) => d,
            None if violation.is_some() => begin,
            None => {
                return Err(SimError::NoProgress {
                    entry: i as u64,
                    rounds: client.rounds[i],
                })
            }
        };
        let final_bytes = client.position[i].map_or(0, |(t, idx)| c.entry_storage(t, idx));
        records.push(MetricsRecord {
            entry_index: i as u64,
            protocol: cfg.protocol,
            dispersal_latency_ms: ns_to_ms(done - begin),
            retransmission_rounds: client.rounds[i],
            total_storage_bytes: windows[i].0,
            per_node_max_bytes: windows[i].1,
            per_entry_final_storage_bytes: final_bytes,
        });
    }
    Ok(RunOutput {
        records,
        trace: c.take_trace(),
        violation,
    })
}

/// Randomized crash-recovery workload on a small cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct CrashRecoveryConfig {
    pub seed: u64,
    pub n_nodes: usize,
    pub max_faults: usize,
    pub delta: usize,
    pub commands: usize,
    /// Distinct keys the random `Put`s draw from.
    pub keys: usize,
    pub value_len: usize,
    pub submit_interval_ms: f64,
    /// Crash the leader each time this many more commands have committed.
    pub crash_every: usize,
    /// Crashed leaders restart after a uniform delay in this range.
    pub restart_ms: (f64, f64),
    /// Isolate a random follower for a while in between leader crashes.
    pub follower_outages: bool,
    pub latency: LatencyModel,
    pub timeout_ms: f64,
    pub heartbeat_ms: f64,
    pub prune_interval_ms: f64,
}

impl Default for CrashRecoveryConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_nodes: 5,
            max_faults: 2,
            delta: 1,
            commands: 500,
            keys: 32,
            value_len: 24,
            submit_interval_ms: 1.0,
            crash_every: 100,
            restart_ms: (5.0, 40.0),
            follower_outages: true,
            latency: LatencyModel {
                mean_ms: 0.8,
                stddev_ms: 0.3,
            },
            timeout_ms: 1.1,
            heartbeat_ms: 2.0,
            prune_interval_ms: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrashRecoveryReport {
    pub commands: usize,
    pub committed_commands: usize,
    pub leader_crashes: usize,
    pub leader_changes: usize,
    pub follower_outages: usize,
    pub final_commit: LogIndex,
    /// Applied-map dumps per node after final reconstruction.
    pub node_dumps: Vec<String>,
    /// Sequential replay of the committed record.
    pub oracle_dump: String,
    pub violations: Vec<String>,
}

impl CrashRecoveryReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty() && self.committed_commands == self.commands
    }
}

const OUTAGE_TAG: u64 = u64::MAX;

/// Submits random `Put`s, crashes the leader after every `crash_every`
/// commits and then restarts it, and isolates random followers, never
/// exceeding `F` simultaneous faults. Afterwards every node's applied map
/// must equal the oracle replay of the committed record.
pub fn crash_recovery(cfg: &CrashRecoveryConfig) -> Result<CrashRecoveryReport, KvError> {
    let settings = ClusterSettings {
        n_nodes: cfg.n_nodes,
        max_faults: cfg.max_faults,
        delta: cfg.delta,
        latency: cfg.latency,
        timeout_ms: cfg.timeout_ms,
        heartbeat_ms: cfg.heartbeat_ms,
        election_timeout_ms: ELECTION_HEARTBEATS * cfg.heartbeat_ms,
        prune_interval_ms: Some(cfg.prune_interval_ms),
        seed: cfg.seed,
        audit: true,
        trace: false,
    };
    let mut c = KvCluster::new(settings)?;
    let mut rng = stream(cfg.seed, cfg.n_nodes + 1, Purpose::Harness);
    let commands = (0..cfg.commands)
        .map(|_| {
            let key = format!("k{}", rng.random_range(0..cfg.keys));
            KvCommand::put(key, fill_bytes(&mut rng, cfg.value_len))
        })
        .collect();
    let mut client = Client::new(commands);
    let interval = ms_to_ns(cfg.submit_interval_ms);
    for k in 0..cfg.commands {
        c.wake_at(k as u64 * interval, k as u64);
    }
    let outage_gap = |rng: &mut rand_chacha::ChaCha8Rng| ms_to_ns(rng.random_range(10.0..40.0));
    if cfg.follower_outages {
        let first = outage_gap(&mut rng);
        c.wake_at(first, OUTAGE_TAG);
    }

    let planned_crashes = cfg.commands / cfg.crash_every;
    let mut violations = Vec::new();
    let mut crashes = 0;
    let mut outages = 0;
    let mut changes = 0;
    let mut elected_once = false;
    let settle = SETTLE_HEARTBEATS * ms_to_ns(cfg.heartbeat_ms);
    let mut quiet_since: Option<u64> = None;
    let deadline = cfg.commands as u64 * interval + ms_to_ns(DEADLINE_MS);

    while let Some(notices) = c.step()? {
        for note in &notices {
            match *note {
                Notice::Wake(OUTAGE_TAG) => {
                    let leader = c.leader();
                    let candidates: Vec<usize> = (0..cfg.n_nodes)
                        .filter(|&j| Some(NodeId(j)) != leader)
                        .filter(|&j| !c.is_crashed(NodeId(j)) && !c.is_isolated(NodeId(j)))
                        .collect();
                    // Leave room for the next leader crash.
                    if c.faulty() + 2 <= cfg.max_faults && !candidates.is_empty() {
                        let j = candidates[rng.random_range(0..candidates.len())];
                        let heal = c.now_ns() + ms_to_ns(rng.random_range(5.0..30.0));
                        c.fault_at(c.now_ns(), Fault::Isolate(j));
                        c.fault_at(heal, Fault::Heal(j));
                        outages += 1;
                    }
                    if !client.all_committed() {
                        let next = c.now_ns() + outage_gap(&mut rng);
                        c.wake_at(next, OUTAGE_TAG);
                    }
                }
                Notice::Wake(k) => client.submit(k as usize, &mut c)?,
                Notice::Elected { .. } => {
                    if elected_once {
                        changes += 1;
                    }
                    elected_once = true;
                }
                Notice::Violation(ref m) => violations.push(m.clone()),
                _ => {}
            }
        }
        if let Some(m) = client.observe(&notices, &mut c)? {
            if !violations.contains(&m) {
                violations.push(m);
            }
        }
        if !violations.is_empty() {
            break;
        }
        if crashes < planned_crashes && client.done >= (crashes + 1) * cfg.crash_every {
            if let Some(l) = c.leader() {
                if c.faulty() < cfg.max_faults {
                    let now = c.now_ns();
                    let back = now + ms_to_ns(rng.random_range(cfg.restart_ms.0..cfg.restart_ms.1));
                    c.fault_at(now, Fault::Crash(l.0));
                    c.fault_at(back, Fault::Restart(l.0));
                    crashes += 1;
                }
            }
        }
        let now = c.now_ns();
        let quiet = client.all_committed()
            && crashes == planned_crashes
            && c.faulty() == 0
            && c.leader().is_some();
        if quiet {
            let since = *quiet_since.get_or_insert(now);
            if now >= since + settle {
                break;
            }
        } else {
            quiet_since = None;
        }
        if now > deadline {
            violations.push(format!(
                "only {} of {} commands committed by the deadline",
                client.done, cfg.commands
            ));
            break;
        }
    }

    if let Err(e) = c.check_log_matching() {
        violations.push(e);
    }
    let all: Vec<u64> = c.committed().keys().copied().collect();
    if let Err(e) = c.check_reconstructable(&all) {
        violations.push(e);
    }
    let contiguous = all.iter().enumerate().all(|(k, &i)| i == k as u64 + 1);
    if !contiguous {
        violations.push("committed record has gaps".into());
    }
    let final_commit = LogIndex(all.last().copied().unwrap_or(0));
    let oracle = replay(c.committed(), final_commit)?;
    let mut node_dumps = Vec::with_capacity(cfg.n_nodes);
    for j in 0..cfg.n_nodes {
        let id = NodeId(j);
        let commit = c.node(id).commit_index();
        let expected = replay(c.committed(), commit)?;
        let store = c.materialize(id)?;
        if *store != expected {
            violations.push(format!(
                "n{j} applied state diverges from the oracle at commit {commit}"
            ));
        }
        node_dumps.push(store.dump());
    }
    if let Some(l) = c.leader() {
        if c.node(l).commit_index() != final_commit {
            violations.push(format!(
                "leader commit {} differs from the committed record {final_commit}",
                c.node(l).commit_index()
            ));
        }
    }
    Ok(CrashRecoveryReport {
        commands: cfg.commands,
        committed_commands: client.done,
        leader_crashes: crashes,
        leader_changes: changes,
        follower_outages: outages,
        final_commit,
        node_dumps,
        oracle_dump: oracle.dump(),
        violations,
    })
}
