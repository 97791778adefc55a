//! The discrete-event loop for standalone dispersal runs.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet};

use radix_heap::RadixHeapMap;

use super::check::tolerates_failures;
use super::rng::{ms_to_ns, ns_to_ms, stream, LatencySampler, Purpose};
use super::{
    CrashTarget, MetricsRecord, RunOptions, RunOutput, ScenarioConfig, SimError, Violation,
};
use crate::codec::MessageId;
use crate::protocol::{
    Body, DispersalLeader, NodeId, Payload, ProtocolMessage, Shard, StorageNode, TimerAction,
};

/// A dispersal still timing out after this many rounds is declared stuck.
const MAX_TIMEOUT_ROUNDS: u32 = 10_000;

#[derive(Debug)]
enum Kind<S> {
    Fault { node: usize, crashed: bool },
    Deliver(ProtocolMessage<S>),
    Timer { id: MessageId, version: u32 },
    Flush,
    WindowEnd(u64),
    EntryStart(u64),
}

/// Ack updates produced at one instant go out after every delivery and
/// timer of that instant, before windows close.
const FLUSH_RANK: u8 = 3;

impl<S> Kind<S> {
    fn rank(&self) -> u8 {
        match self {
            Kind::Fault { .. } => 0,
            Kind::Deliver(_) => 1,
            Kind::Timer { .. } => 2,
            Kind::Flush => FLUSH_RANK,
            Kind::WindowEnd(_) => 4,
            Kind::EntryStart(_) => 5,
        }
    }
}

const SENDER_BITS: u32 = 21;
const SEQ_BITS: u32 = 40;

/// `(time, kind rank, sender, sequence)` packed so that integer order is
/// event order. Every key pushed is at or after the one last popped, which
/// the radix queue requires.
fn event_key(time: u64, rank: u8, sender: usize, seq: u64) -> u128 {
    assert!(sender < 1 << SENDER_BITS && seq < 1 << SEQ_BITS);
    (time as u128) << 64
        | (rank as u128) << (SENDER_BITS + SEQ_BITS)
        | (sender as u128) << SEQ_BITS
        | seq as u128
}

/// Event payloads, kept out of the heap so reordering moves only keys.
#[derive(Debug)]
struct Slab<T> {
    items: Vec<Option<T>>,
    free: Vec<usize>,
}

impl<T> Slab<T> {
    fn new() -> Self {
        Self {
            items: Vec::new(),
            free: Vec::new(),
        }
    }

    fn insert(&mut self, item: T) -> usize {
        match self.free.pop() {
            Some(i) => {
                self.items[i] = Some(item);
                i
            }
            None => {
                self.items.push(Some(item));
                self.items.len() - 1
            }
        }
    }

    fn take(&mut self, i: usize) -> T {
        self.free.push(i);
        self.items[i].take().expect("slot holds an event")
    }
}

#[derive(Debug, Clone, Default)]
struct Timer {
    version: u32,
    armed: bool,
    fires: u32,
}

#[derive(Debug, Clone, Default)]
struct EntryStats {
    begin: u64,
    done: Option<u64>,
    rounds: u32,
    total_bytes: u64,
    node_max_bytes: u64,
}

/// Half-open virtual-time windows during which a node is unreachable.
type Windows = Vec<Vec<(u64, u64)>>;

fn inside(windows: &[(u64, u64)], t: u64) -> bool {
    windows.iter().any(|&(s, e)| s <= t && t < e)
}

/// Simulates one scenario with leader `L`. `make_payload(i)` builds entry `i`.
pub(super) struct DispersalSim<'a, L: DispersalLeader, F> {
    cfg: &'a ScenarioConfig,
    opts: RunOptions,
    leader: L,
    nodes: Vec<StorageNode<<L::Payload as Payload>::Shard>>,
    make_payload: F,
    queue: RadixHeapMap<Reverse<u128>, usize>,
    events: Slab<Kind<<L::Payload as Payload>::Shard>>,
    seq: u64,
    now: u64,
    interval_ns: u64,
    timeout_ns: u64,
    rtt: Vec<LatencySampler>,
    control: Vec<LatencySampler>,
    timers: Vec<Timer>,
    entries: Vec<EntryStats>,
    /// Ack updates produced at the current instant, coalesced per (id, node).
    pending_updates: BTreeMap<(u64, usize), u16>,
    partitioned: Windows,
    crashed: Windows,
    trace: Vec<String>,
    dirty: BTreeSet<u64>,
    violation: Option<Violation>,
}

impl<'a, L, F> DispersalSim<'a, L, F>
where
    L: DispersalLeader,
    F: FnMut(u64) -> L::Payload,
{
    pub(super) fn new(
        cfg: &'a ScenarioConfig,
        opts: RunOptions,
        leader: L,
        make_payload: F,
    ) -> Self {
        let n = cfg.n_nodes;
        let interval_ns = ms_to_ns(cfg.entry_interval_ms);
        let nodes = (0..n).map(|j| leader.storage_node(NodeId(j))).collect();
        let mut partitioned: Windows = vec![Vec::new(); n];
        for p in &cfg.partitions {
            for &j in &p.nodes {
                partitioned[j].push((p.start_entry * interval_ns, p.end_entry * interval_ns));
            }
        }
        let mut crashed: Windows = vec![Vec::new(); n];
        for c in &cfg.crash_schedule {
            if let CrashTarget::Node(j) = c.target {
                let end = c.recover_entry.map_or(u64::MAX, |r| r * interval_ns);
                crashed[j].push((c.entry * interval_ns, end));
            }
        }
        let sampler = |j, purpose| LatencySampler::new(cfg.latency, stream(cfg.seed, j, purpose));
        Self {
            cfg,
            opts,
            nodes,
            leader,
            make_payload,
            queue: RadixHeapMap::new(),
            events: Slab::new(),
            seq: 0,
            now: 0,
            interval_ns,
            timeout_ns: ms_to_ns(cfg.timeout_ms),
            rtt: (0..n).map(|j| sampler(j, Purpose::RoundTrip)).collect(),
            control: (0..n).map(|j| sampler(j, Purpose::Control)).collect(),
            timers: vec![Timer::default(); cfg.num_entries as usize],
            entries: vec![EntryStats::default(); cfg.num_entries as usize],
            pending_updates: BTreeMap::new(),
            partitioned,
            crashed,
            trace: Vec::new(),
            dirty: BTreeSet::new(),
            violation: None,
        }
    }

    fn push(&mut self, time: u64, sender: usize, kind: Kind<<L::Payload as Payload>::Shard>) {
        self.seq += 1;
        let key = event_key(time, kind.rank(), sender, self.seq);
        let slot = self.events.insert(kind);
        self.queue.push(Reverse(key), slot);
    }

    fn log(&mut self, line: impl FnOnce() -> String) {
        if self.opts.trace {
            let t = ns_to_ms(self.now);
            self.trace.push(format!("{t:.6} {}", line()));
        }
    }

    fn is_crashed(&self, node: usize, t: u64) -> bool {
        inside(&self.crashed[node], t)
    }

    fn unreachable(&self, node: usize, t: u64) -> bool {
        inside(&self.partitioned[node], t) || self.is_crashed(node, t)
    }

    fn store(&self, node: usize) -> &StorageNode<<L::Payload as Payload>::Shard> {
        if node == NodeId::LEADER.0 {
            self.leader.local_store()
        } else {
            &self.nodes[node]
        }
    }

    pub(super) fn run(mut self) -> Result<RunOutput, SimError> {
        self.push(0, 0, Kind::EntryStart(0));
        let faults: Vec<(usize, u64, u64)> = self
            .crashed
            .iter()
            .enumerate()
            .flat_map(|(j, w)| w.iter().map(move |&(s, e)| (j, s, e)))
            .collect();
        for (j, start, end) in faults {
            self.push(
                start,
                j,
                Kind::Fault {
                    node: j,
                    crashed: true,
                },
            );
            if end != u64::MAX {
                self.push(
                    end,
                    j,
                    Kind::Fault {
                        node: j,
                        crashed: false,
                    },
                );
            }
        }
        let mut flush_scheduled = false;
        while let Some((Reverse(key), slot)) = self.queue.pop() {
            self.now = (key >> 64) as u64;
            let kind = self.events.take(slot);
            let rank = kind.rank();
            match kind {
                Kind::Flush => {
                    flush_scheduled = false;
                    self.flush_updates();
                }
                Kind::EntryStart(i) => self.start_entry(i)?,
                Kind::WindowEnd(i) => self.close_window(i),
                Kind::Timer { id, version } => self.fire_timer(id, version)?,
                Kind::Deliver(msg) => self.deliver(msg)?,
                Kind::Fault { node, crashed } => {
                    self.log(|| format!("{} n{node}", if crashed { "crash" } else { "recover" }));
                    let done: Vec<u64> = (0..self.entries.len() as u64)
                        .filter(|&i| self.entries[i as usize].done.is_some())
                        .collect();
                    self.dirty.extend(done);
                }
            }
            if self.opts.verify {
                self.check_dirty();
                if self.violation.is_some() {
                    break;
                }
            }
            if !self.pending_updates.is_empty() && !flush_scheduled {
                if rank < FLUSH_RANK {
                    flush_scheduled = true;
                    self.push(self.now, 0, Kind::Flush);
                } else {
                    self.flush_updates();
                }
            }
        }
        self.finish()
    }

    fn start_entry(&mut self, i: u64) -> Result<(), SimError> {
        let id = MessageId(i);
        let payload = (self.make_payload)(i);
        self.log(|| format!("begin id={i}"));
        self.entries[i as usize].begin = self.now;
        let r = self.leader.begin(id, payload)?;
        self.apply(id, r);
        let next = (i + 1) * self.interval_ns;
        self.push(next, 0, Kind::WindowEnd(i));
        if i + 1 < self.cfg.num_entries {
            self.push(next, 0, Kind::EntryStart(i + 1));
        }
        Ok(())
    }

    fn close_window(&mut self, i: u64) {
        let mut total = 0;
        let mut max = 0;
        for j in 0..self.cfg.n_nodes {
            if !self.is_crashed(j, self.now) {
                let b = self.store(j).total_bytes();
                total += b;
                max = max.max(b);
            }
        }
        let e = &mut self.entries[i as usize];
        e.total_bytes = total;
        e.node_max_bytes = max;
    }

    fn fire_timer(&mut self, id: MessageId, version: u32) -> Result<(), SimError> {
        let t = &mut self.timers[id.0 as usize];
        if !t.armed || t.version != version {
            return Ok(());
        }
        t.armed = false;
        t.fires += 1;
        if t.fires > MAX_TIMEOUT_ROUNDS {
            return Err(SimError::NoProgress {
                entry: id.0,
                rounds: MAX_TIMEOUT_ROUNDS,
            });
        }
        self.log(|| format!("timeout id={id}"));
        let r = self.leader.on_timeout(id)?;
        self.apply(id, r);
        Ok(())
    }

    fn deliver(
        &mut self,
        msg: ProtocolMessage<<L::Payload as Payload>::Shard>,
    ) -> Result<(), SimError> {
        let remote = if msg.to == NodeId::LEADER {
            msg.from.0
        } else {
            msg.to.0
        };
        if self.unreachable(remote, self.now) {
            self.log(|| format!("drop {msg}"));
            return Ok(());
        }
        self.log(|| format!("deliver {msg}"));
        let id = msg.body.id();
        if msg.to == NodeId::LEADER {
            let r = self.leader.handle(msg)?;
            self.apply(id, r);
        } else {
            let j = msg.to.0;
            if let Some(ack) = self.nodes[j].handle(msg)? {
                // Replies travel back within the sampled round trip.
                self.push(self.now, j, Kind::Deliver(ack));
            }
            if self.opts.verify {
                self.dirty.insert(id.0);
            }
        }
        Ok(())
    }

    fn apply(
        &mut self,
        id: MessageId,
        r: crate::protocol::Reaction<<L::Payload as Payload>::Shard>,
    ) {
        for m in r.messages {
            match m.body {
                Body::AckUpdate { id, quorum } => {
                    let q = self.pending_updates.entry((id.0, m.to.0)).or_insert(0);
                    *q = (*q).max(quorum);
                }
                _ => {
                    let delay = self.rtt[m.to.0].sample_ns();
                    self.push(self.now + delay, 0, Kind::Deliver(m));
                }
            }
        }
        if let Some(c) = r.completed {
            let e = &mut self.entries[c.id.0 as usize];
            e.done = Some(self.now);
            e.rounds = c.retransmission_rounds;
            self.log(|| format!("done id={} rounds={}", c.id, c.retransmission_rounds));
            if self.opts.verify && self.leader.dispersal_safe(c.id) == Some(false) {
                self.violate(
                    c.id.0,
                    "ack set does not survive F failures at completion".into(),
                );
            }
        }
        let timeout = self.timeout_ns;
        let t = &mut self.timers[id.0 as usize];
        match r.timer {
            TimerAction::Unchanged => {}
            TimerAction::Arm => {
                t.version += 1;
                t.armed = true;
                let version = t.version;
                self.push(self.now + timeout, 0, Kind::Timer { id, version });
            }
            TimerAction::Cancel => {
                t.version += 1;
                t.armed = false;
            }
        }
        if self.opts.verify {
            self.dirty.insert(id.0);
        }
    }

    fn flush_updates(&mut self) {
        for ((id, to), quorum) in std::mem::take(&mut self.pending_updates) {
            let delay = self.control[to].sample_ns();
            let msg = ProtocolMessage {
                from: NodeId::LEADER,
                to: NodeId(to),
                body: Body::AckUpdate {
                    id: MessageId(id),
                    quorum,
                },
            };
            self.push(self.now + delay, 0, Kind::Deliver(msg));
        }
    }

    fn violate(&mut self, entry: u64, message: String) {
        if self.violation.is_none() {
            self.log(|| format!("violation id={entry} {message}"));
            self.violation = Some(Violation {
                time_ms: ns_to_ms(self.now),
                entry,
                message,
            });
        }
    }

    fn check_dirty(&mut self) {
        for i in std::mem::take(&mut self.dirty) {
            if self.entries[i as usize].done.is_none() {
                continue;
            }
            let id = MessageId(i);
            let holdings: Vec<_> = (0..self.cfg.n_nodes)
                .map(|j| {
                    (!self.is_crashed(j, self.now)).then(|| {
                        let s = self.store(j);
                        let g = s.generation(id);
                        s.fragments(id).iter().map(|f| (g, f.index())).collect()
                    })
                })
                .collect();
            let leader = &self.leader;
            if let Err(failed) = tolerates_failures(&holdings, self.cfg.max_faults, |g| {
                leader.data_shards(id, g)
            }) {
                self.violate(
                    i,
                    format!("not reconstructable after failing nodes {failed:?}"),
                );
                return;
            }
        }
    }

    fn finish(self) -> Result<RunOutput, SimError> {
        let mut records = Vec::with_capacity(self.entries.len());
        let end = self.now;
        for (i, e) in self.entries.iter().enumerate() {
            let done = match e.done {
                Some(d) => d,
                None if self.violation.is_some() => e.begin,
                None => {
                    return Err(SimError::NoProgress {
                        entry: i as u64,
                        rounds: self.timers[i].fires,
                    })
                }
            };
            let id = MessageId(i as u64);
            let final_bytes = (0..self.cfg.n_nodes)
                .filter(|&j| !self.is_crashed(j, end))
                .map(|j| self.store(j).stored_bytes(id))
                .sum();
            records.push(MetricsRecord {
                entry_index: i as u64,
                protocol: self.cfg.protocol,
                dispersal_latency_ms: ns_to_ms(done - e.begin),
                retransmission_rounds: e.rounds,
                total_storage_bytes: e.total_bytes,
                per_node_max_bytes: e.node_max_bytes,
                per_entry_final_storage_bytes: final_bytes,
            });
        }
        Ok(RunOutput {
            records,
            trace: self.trace,
            violation: self.violation,
        })
    }
}
