//! Event loop for a replicated-log cluster: FIFO links with sampled round
//! trips, crashes, isolation, scripted leader changes and background pruning.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::command::{KvCommand, KvStore};
use super::node::{KvBody, KvMessage, Output, RaftNode, Threshold};
use super::{KvError, KvParams, LogIndex, Term};
use crate::codec::Fragment;
use crate::protocol::NodeId;
use crate::sim::rng::{ms_to_ns, ns_to_ms, stream, LatencySampler, Purpose};
use crate::sim::{tolerates_failures, Holding, LatencyModel};

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSettings {
    pub n_nodes: usize,
    pub max_faults: usize,
    pub delta: usize,
    pub latency: LatencyModel,
    pub timeout_ms: f64,
    pub heartbeat_ms: f64,
    /// Delay between losing the leader and the scripted leader change.
    pub election_timeout_ms: f64,
    /// Mean gap between background prunes per node; `None` prunes on every append.
    pub prune_interval_ms: Option<f64>,
    pub seed: u64,
    /// Check safety invariants after every event.
    pub audit: bool,
    pub trace: bool,
}

/// What a step produced that a driver may react to.
#[derive(Debug, Clone, PartialEq)]
pub enum Notice {
    Committed {
        leader: NodeId,
        term: Term,
        index: LogIndex,
    },
    Dispersed {
        leader: NodeId,
        term: Term,
        index: LogIndex,
        rounds: u32,
    },
    Elected {
        leader: NodeId,
        term: Term,
    },
    Stalled(KvError),
    /// A driver wake-up scheduled with [`KvCluster::wake_at`].
    Wake(u64),
    Violation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    Crash(usize),
    Restart(usize),
    Isolate(usize),
    Heal(usize),
}

#[derive(Debug)]
enum Kind {
    Fault(Fault),
    Deliver(KvMessage),
    Timer {
        node: usize,
        term: Term,
        index: LogIndex,
    },
    Heartbeat {
        node: usize,
        term: Term,
    },
    Prune(usize),
    Elect,
    Wake(u64),
}

impl Kind {
    fn rank(&self) -> u8 {
        match self {
            Kind::Fault(_) => 0,
            Kind::Deliver(_) => 1,
            Kind::Timer { .. } | Kind::Heartbeat { .. } | Kind::Prune(_) => 2,
            Kind::Elect => 3,
            Kind::Wake(_) => 4,
        }
    }
}

/// Ordered by `(time, kind rank, sender, sequence)`.
#[derive(Debug)]
struct Event {
    time: u64,
    rank: u8,
    sender: usize,
    seq: u64,
    kind: Kind,
}

impl Event {
    fn key(&self) -> (u64, u8, usize, u64) {
        (self.time, self.rank, self.sender, self.seq)
    }
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key().cmp(&other.key())
    }
}

/// Leader thresholds last seen per node, for the monotonicity audit.
#[derive(Debug, Clone, Copy, Default)]
struct SeenThresholds {
    term: Term,
    t1: LogIndex,
    t2: LogIndex,
}

pub struct KvCluster {
    settings: ClusterSettings,
    params: KvParams,
    nodes: Vec<RaftNode>,
    crashed: Vec<bool>,
    isolated: Vec<bool>,
    queue: BinaryHeap<Reverse<Event>>,
    seq: u64,
    now: u64,
    /// Earliest next delivery per directed link, keeping links FIFO.
    link_free: Vec<u64>,
    rtt: Vec<LatencySampler>,
    harness: ChaCha8Rng,
    leader: Option<usize>,
    election_pending: bool,
    committed: BTreeMap<u64, (Term, Vec<u8>)>,
    seen: Vec<SeenThresholds>,
    /// Merged thresholds last seen per node, which must never fall.
    merged: Vec<(Option<Threshold>, Option<Threshold>)>,
    trace: Vec<String>,
    notices: Vec<Notice>,
}

impl KvCluster {
    pub fn new(settings: ClusterSettings) -> Result<Self, KvError> {
        let n = settings.n_nodes;
        let params = KvParams::new(
            n,
            settings.max_faults,
            settings.delta,
            settings.prune_interval_ms.is_none(),
        )?;
        let nodes = (0..n)
            .map(|j| {
                let mut node = RaftNode::new(NodeId(j), params.clone());
                if settings.audit {
                    node.audit_discards();
                }
                node
            })
            .collect();
        let rtt = (0..n)
            .map(|j| {
                LatencySampler::new(
                    settings.latency,
                    stream(settings.seed, j, Purpose::RoundTrip),
                )
            })
            .collect();
        let harness = stream(settings.seed, n, Purpose::Harness);
        let mut c = Self {
            params,
            nodes,
            crashed: vec![false; n],
            isolated: vec![false; n],
            queue: BinaryHeap::new(),
            seq: 0,
            now: 0,
            link_free: vec![0; n * n],
            rtt,
            harness,
            leader: None,
            election_pending: true,
            committed: BTreeMap::new(),
            seen: vec![SeenThresholds::default(); n],
            merged: vec![(None, None); n],
            trace: Vec::new(),
            notices: Vec::new(),
            settings,
        };
        c.push(0, 0, Kind::Elect);
        if let Some(mean) = c.settings.prune_interval_ms {
            for j in 0..n {
                let gap = c.prune_gap(mean);
                c.push(gap, j, Kind::Prune(j));
            }
        }
        Ok(c)
    }

    fn prune_gap(&mut self, mean_ms: f64) -> u64 {
        ms_to_ns(self.harness.random_range(0.0..2.0 * mean_ms))
    }

    fn push(&mut self, time: u64, sender: usize, kind: Kind) {
        self.seq += 1;
        self.queue.push(Reverse(Event {
            time,
            rank: kind.rank(),
            sender,
            seq: self.seq,
            kind,
        }));
    }

    fn log(&mut self, line: impl FnOnce() -> String) {
        if self.settings.trace {
            let t = ns_to_ms(self.now);
            self.trace.push(format!("{t:.6} {}", line()));
        }
    }

    pub fn settings(&self) -> &ClusterSettings {
        &self.settings
    }

    pub fn params(&self) -> &KvParams {
        &self.params
    }

    pub fn now_ns(&self) -> u64 {
        self.now
    }

    pub fn now_ms(&self) -> f64 {
        ns_to_ms(self.now)
    }

    pub fn nodes(&self) -> &[RaftNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &RaftNode {
        &self.nodes[id.0]
    }

    pub fn leader(&self) -> Option<NodeId> {
        self.leader.map(NodeId)
    }

    pub fn is_crashed(&self, id: NodeId) -> bool {
        self.crashed[id.0]
    }

    pub fn is_isolated(&self, id: NodeId) -> bool {
        self.isolated[id.0]
    }

    /// Nodes currently crashed or isolated.
    pub fn faulty(&self) -> usize {
        (0..self.nodes.len())
            .filter(|&j| self.crashed[j] || self.isolated[j])
            .count()
    }

    /// Every entry any leader committed, by index: its term and contents.
    pub fn committed(&self) -> &BTreeMap<u64, (Term, Vec<u8>)> {
        &self.committed
    }

    pub fn harness_rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.harness
    }

    pub fn take_trace(&mut self) -> Vec<String> {
        std::mem::take(&mut self.trace)
    }

    pub fn fault_at(&mut self, at_ns: u64, fault: Fault) {
        let sender = match fault {
            Fault::Crash(j) | Fault::Restart(j) | Fault::Isolate(j) | Fault::Heal(j) => j,
        };
        self.push(at_ns.max(self.now), sender, Kind::Fault(fault));
    }

    pub fn wake_at(&mut self, at_ns: u64, tag: u64) {
        self.push(at_ns.max(self.now), 0, Kind::Wake(tag));
    }

    /// Fragment bytes over non-crashed nodes: `(total, largest node)`.
    pub fn live_storage(&self) -> (u64, u64) {
        let mut total = 0;
        let mut max = 0;
        for (j, node) in self.nodes.iter().enumerate() {
            if !self.crashed[j] {
                total += node.total_bytes();
                max = max.max(node.total_bytes());
            }
        }
        (total, max)
    }

    /// Bytes of entry `(term, index)` over non-crashed nodes.
    pub fn entry_storage(&self, term: Term, index: LogIndex) -> u64 {
        (0..self.nodes.len())
            .filter(|&j| !self.crashed[j])
            .filter_map(|j| self.nodes[j].slot(index).filter(|s| s.term == term))
            .map(|s| s.stored_bytes())
            .sum()
    }

    /// Appends a command at the current leader. `None` when there is none.
    pub fn submit(&mut self, cmd: KvCommand) -> Result<Option<(Term, LogIndex)>, KvError> {
        let Some(l) = self.leader else {
            return Ok(None);
        };
        if !self.nodes[l].is_leader() {
            return Ok(None);
        }
        let mut out = Output::default();
        let index = self.nodes[l].append(cmd, &mut out)?;
        let term = self.nodes[l].current_term();
        self.log(|| format!("append n{l} term={term} index={index}"));
        self.apply_output(l, out);
        self.after_event(&[l]);
        Ok(Some((term, index)))
    }

    /// Processes one event. `None` once the queue is empty.
    pub fn step(&mut self) -> Result<Option<Vec<Notice>>, KvError> {
        let Some(Reverse(ev)) = self.queue.pop() else {
            return Ok(None);
        };
        self.now = ev.time;
        match ev.kind {
            Kind::Fault(f) => self.fault(f),
            Kind::Deliver(m) => self.deliver(m)?,
            Kind::Timer { node, term, index } => {
                if !self.crashed[node] {
                    let out = self.nodes[node].on_timeout(term, index)?;
                    if !out.messages.is_empty() || !out.dispersed.is_empty() {
                        self.log(|| format!("timeout n{node} index={index}"));
                    }
                    self.apply_output(node, out);
                    self.after_event(&[node]);
                }
            }
            Kind::Heartbeat { node, term } => {
                let n = &self.nodes[node];
                if !self.crashed[node] && n.is_leader() && n.current_term() == term {
                    let out = self.nodes[node].heartbeat();
                    self.apply_output(node, out);
                    let next = self.now + ms_to_ns(self.settings.heartbeat_ms);
                    self.push(next, node, Kind::Heartbeat { node, term });
                }
            }
            Kind::Prune(j) => {
                if !self.crashed[j] {
                    let dropped = self.nodes[j].prune();
                    if dropped > 0 {
                        self.log(|| format!("prune n{j} discarded={dropped}"));
                    }
                    self.after_event(&[j]);
                }
                let mean = self.settings.prune_interval_ms.expect("background pruning");
                let next = self.now + self.prune_gap(mean).max(1);
                self.push(next, j, Kind::Prune(j));
            }
            Kind::Elect => self.elect()?,
            Kind::Wake(tag) => self.notices.push(Notice::Wake(tag)),
        }
        Ok(Some(std::mem::take(&mut self.notices)))
    }

    fn schedule_election(&mut self) {
        if !self.election_pending {
            self.election_pending = true;
            let at = self.now + ms_to_ns(self.settings.election_timeout_ms);
            self.push(at, 0, Kind::Elect);
        }
    }

    fn fault(&mut self, f: Fault) {
        match f {
            Fault::Crash(j) => {
                if self.crashed[j] {
                    return;
                }
                self.log(|| format!("crash n{j}"));
                self.crashed[j] = true;
                self.nodes[j].crash();
                if self.leader == Some(j) {
                    self.leader = None;
                    self.schedule_election();
                }
                if self.settings.audit {
                    let all: Vec<u64> = self.committed.keys().copied().collect();
                    self.audit_reconstructable(&all);
                }
            }
            Fault::Restart(j) => {
                if self.crashed[j] {
                    self.log(|| format!("restart n{j}"));
                    self.crashed[j] = false;
                }
            }
            Fault::Isolate(j) => {
                self.log(|| format!("isolate n{j}"));
                self.isolated[j] = true;
                if self.leader == Some(j) {
                    self.leader = None;
                    self.schedule_election();
                }
            }
            Fault::Heal(j) => {
                self.log(|| format!("heal n{j}"));
                self.isolated[j] = false;
            }
        }
    }

    fn reachable(&self, j: usize) -> bool {
        !self.crashed[j] && !self.isolated[j]
    }

    fn send(&mut self, m: KvMessage) {
        let n = self.nodes.len();
        let link = m.from.0 * n + m.to.0;
        let earliest = match m.body {
            KvBody::Append(_) => self.now + self.rtt[m.to.0].sample_ns(),
            // Replies complete the sampled round trip.
            KvBody::Response(_) => self.now,
        };
        let at = earliest.max(self.link_free[link]);
        self.link_free[link] = at;
        let sender = m.from.0;
        self.push(at, sender, Kind::Deliver(m));
    }

    fn deliver(&mut self, m: KvMessage) -> Result<(), KvError> {
        if !self.reachable(m.from.0) || !self.reachable(m.to.0) {
            self.log(|| format!("drop {m}"));
            return Ok(());
        }
        self.log(|| format!("deliver {m}"));
        let to = m.to.0;
        match m.body {
            KvBody::Append(rpc) => {
                for r in self.nodes[to].on_append_entries(rpc) {
                    self.send(r);
                }
            }
            KvBody::Response(resp) => {
                let out = self.nodes[to].on_response(m.from, resp)?;
                self.apply_output(to, out);
            }
        }
        self.after_event(&[to]);
        Ok(())
    }

    fn apply_output(&mut self, node: usize, out: Output) {
        for m in out.messages {
            self.send(m);
        }
        let term = self.nodes[node].current_term();
        let timeout = ms_to_ns(self.settings.timeout_ms);
        for index in out.arm {
            self.push(self.now + timeout, node, Kind::Timer { node, term, index });
        }
        for (index, rounds) in out.dispersed {
            self.notices.push(Notice::Dispersed {
                leader: NodeId(node),
                term: self.nodes[node].term_at(index).unwrap_or(term),
                index,
                rounds,
            });
        }
        for index in out.committed {
            let n = &self.nodes[node];
            let entry_term = n.term_at(index).expect("committed entries are in the log");
            let content = n
                .leader_state()
                .and_then(|l| l.content(index))
                .expect("the leader holds committed contents")
                .to_vec();
            let (t1, t2) = n
                .leader_state()
                .map_or((LogIndex(0), LogIndex(0)), |l| (l.t1(), l.t2()));
            match self.committed.get(&index.0) {
                Some((t, c)) if *t != entry_term || *c != content => {
                    let m = format!(
                        "index {index} committed as term {t} and again as term {entry_term} with different contents"
                    );
                    self.violation(m);
                }
                Some(_) => {}
                None => {
                    self.committed.insert(index.0, (entry_term, content));
                }
            }
            self.log(|| format!("commit n{node} term={term} index={index} T1={t1} T2={t2}"));
            self.notices.push(Notice::Committed {
                leader: NodeId(node),
                term: entry_term,
                index,
            });
        }
    }

    fn violation(&mut self, message: String) {
        self.log(|| format!("violation {message}"));
        self.notices.push(Notice::Violation(message));
    }

    /// Post-event audit of nodes that may have changed.
    fn after_event(&mut self, touched: &[usize]) {
        if !self.settings.audit {
            return;
        }
        let mut dirty = Vec::new();
        for &j in touched {
            dirty.extend(
                self.nodes[j]
                    .take_discards()
                    .into_iter()
                    .map(|i| i.0)
                    .filter(|i| self.committed.contains_key(i)),
            );
            let (t1, t2) = self.nodes[j].thresholds();
            let (old1, old2) = self.merged[j];
            if t1 < old1 || t2 < old2 {
                self.violation(format!(
                    "n{j} merged thresholds fell from {old1:?}/{old2:?} to {t1:?}/{t2:?}"
                ));
            }
            if t2.map(|t| t.index) > t1.map(|t| t.index) {
                self.violation(format!("n{j} merged T2 {t2:?} above T1 {t1:?}"));
            }
            self.merged[j] = (t1, t2);
            if let Some(l) = self.nodes[j].leader_state() {
                let term = self.nodes[j].current_term();
                let (t1, t2) = (l.t1(), l.t2());
                let seen = self.seen[j];
                if t2 > t1 {
                    self.violation(format!("n{j} has T2={t2} above T1={t1}"));
                }
                if seen.term == term && (t1 < seen.t1 || t2 < seen.t2) {
                    self.violation(format!(
                        "n{j} thresholds regressed from ({}, {}) to ({t1}, {t2}) in term {term}",
                        seen.t1, seen.t2
                    ));
                }
                self.seen[j] = SeenThresholds { term, t1, t2 };
            }
        }
        dirty.sort_unstable();
        dirty.dedup();
        self.audit_reconstructable(&dirty);
    }

    fn audit_reconstructable(&mut self, indices: &[u64]) {
        if let Err(e) = self.check_reconstructable(indices) {
            self.violation(e);
        }
    }

    /// Brute-force check that each committed entry in `indices` survives any
    /// further failures up to `F` (crashed nodes count against the budget).
    pub fn check_reconstructable(&self, indices: &[u64]) -> Result<(), String> {
        let f = self.params.max_faults();
        for &i in indices {
            let Some((term, _)) = self.committed.get(&i) else {
                continue;
            };
            let holdings: Vec<Holding> = (0..self.nodes.len())
                .map(|j| {
                    (!self.crashed[j]).then(|| {
                        self.nodes[j]
                            .slot(LogIndex(i))
                            .filter(|s| s.term == *term)
                            .map(|s| s.fragments().iter().map(|fr| (0, fr.index)).collect())
                            .unwrap_or_default()
                    })
                })
                .collect();
            if let Err(failed) = tolerates_failures(&holdings, f, |_| Some(f + 1)) {
                return Err(format!(
                    "committed index {i} not reconstructable after failing nodes {failed:?}"
                ));
            }
        }
        Ok(())
    }

    /// Any two logs agreeing on `(term, index)` agree on every earlier term.
    pub fn check_log_matching(&self) -> Result<(), String> {
        for a in 0..self.nodes.len() {
            for b in a + 1..self.nodes.len() {
                let (la, lb) = (self.nodes[a].log(), self.nodes[b].log());
                let common = la.len().min(lb.len());
                let Some(top) = (0..common).rev().find(|&i| la[i].term == lb[i].term) else {
                    continue;
                };
                if let Some(i) = (0..top).find(|&i| la[i].term != lb[i].term) {
                    return Err(format!(
                        "n{a} and n{b} share index {} but differ at index {}",
                        top + 1,
                        i + 1
                    ));
                }
            }
        }
        Ok(())
    }

    /// Collects `F+1` distinct fragments of `(term, index)` from `from`.
    pub fn reconstruct(
        &self,
        term: Term,
        index: LogIndex,
        from: &[usize],
    ) -> Result<Vec<u8>, KvError> {
        let need = self.params.max_faults() + 1;
        let mut frags: BTreeMap<u16, &Fragment> = BTreeMap::new();
        for &j in from {
            if let Some(s) = self.nodes[j].slot(index).filter(|s| s.term == term) {
                for fr in s.fragments() {
                    frags.entry(fr.index).or_insert(fr);
                }
            }
        }
        if frags.len() < need {
            return Err(KvError::Unavailable {
                index,
                have: frags.len(),
                need,
            });
        }
        let chosen: Vec<Fragment> = frags.into_values().take(need).cloned().collect();
        Ok(self.params.codec().decode(&chosen)?)
    }

    fn reachable_nodes(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&j| self.reachable(j))
            .collect()
    }

    /// Brings node `j`'s applied map up to its commit index by
    /// reconstructing committed entries from reachable nodes.
    pub fn materialize(&mut self, id: NodeId) -> Result<&KvStore, KvError> {
        let from = self.reachable_nodes();
        let node = &self.nodes[id.0];
        let mut contents = Vec::with_capacity(node.commit_index().0 as usize);
        for i in 1..=node.commit_index().0 {
            let index = LogIndex(i);
            let term = node
                .term_at(index)
                .expect("committed entries are in the log");
            contents.push(self.reconstruct(term, index, &from)?);
        }
        self.nodes[id.0].apply_committed(&contents)?;
        Ok(self.nodes[id.0].store())
    }

    /// Scripted leader change: the reachable node with the most up-to-date
    /// log (lowest id on ties) takes a new term, reconstructs its log and
    /// re-disseminates it.
    fn elect(&mut self) -> Result<(), KvError> {
        self.election_pending = false;
        if self.leader.is_some_and(|l| self.reachable(l)) {
            return Ok(());
        }
        let voters = self.reachable_nodes();
        let needed = self.params.max_faults() + 1;
        if voters.len() < needed {
            let err = KvError::ElectionStall {
                reachable: voters.len(),
                needed,
            };
            self.log(|| format!("stall {err}"));
            self.notices.push(Notice::Stalled(err));
            self.schedule_election();
            return Ok(());
        }
        let cand = *voters
            .iter()
            .max_by(|&&a, &&b| {
                let key = |j: usize| (self.nodes[j].last_term(), self.nodes[j].last_index());
                key(a).cmp(&key(b)).then(b.cmp(&a))
            })
            .unwrap();
        let term = Term(self.nodes.iter().map(|n| n.current_term().0).max().unwrap() + 1);
        for &v in &voters {
            if v != cand {
                self.nodes[v].observe_term(term);
            }
        }
        let mut contents = Vec::new();
        for i in 1..=self.nodes[cand].last_index().0 {
            let index = LogIndex(i);
            let t = self.nodes[cand].term_at(index).unwrap();
            match self.reconstruct(t, index, &voters) {
                Ok(bytes) => contents.push(bytes),
                Err(e) => {
                    self.log(|| format!("unreconstructable n{cand} index={index}: {e}"));
                    if let Err(e) = self.nodes[cand].truncate_from(index) {
                        self.violation(e.to_string());
                        return Ok(());
                    }
                    break;
                }
            }
        }
        let out = self.nodes[cand].become_leader(term, contents)?;
        let (last, last_term) = (self.nodes[cand].last_index(), self.nodes[cand].last_term());
        self.log(|| format!("elect n{cand} term={term} last={last}/{last_term}"));
        self.leader = Some(cand);
        self.seen[cand] = SeenThresholds {
            term,
            ..SeenThresholds::default()
        };
        if self.settings.audit {
            self.audit_completeness(cand);
        }
        self.apply_output(cand, out);
        self.after_event(&[cand]);
        let next = self.now + ms_to_ns(self.settings.heartbeat_ms);
        self.push(next, cand, Kind::Heartbeat { node: cand, term });
        self.notices.push(Notice::Elected {
            leader: NodeId(cand),
            term,
        });
        Ok(())
    }

    /// Every committed entry is in the new leader's log with the same contents.
    fn audit_completeness(&mut self, leader: usize) {
        let node = &self.nodes[leader];
        let l = node.leader_state().expect("just elected");
        let missing = self.committed.iter().find(|(&i, (t, c))| {
            let index = LogIndex(i);
            node.term_at(index) != Some(*t) || l.content(index) != Some(c.as_slice())
        });
        if let Some((&i, _)) = missing {
            self.violation(format!("new leader n{leader} lacks committed index {i}"));
        }
    }
}

/// State of a fresh store after applying the committed record through `upto`.
pub fn replay(
    committed: &BTreeMap<u64, (Term, Vec<u8>)>,
    upto: LogIndex,
) -> Result<KvStore, KvError> {
    let mut store = KvStore::default();
    for (&i, (_, bytes)) in committed.range(1..=upto.0) {
        store.apply(LogIndex(i), &KvCommand::from_bytes(bytes)?);
    }
    Ok(store)
}
