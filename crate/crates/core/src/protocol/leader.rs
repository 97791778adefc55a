//! The eAID leader. It starts each dispersal with `f_per = ⌈(F+1)/t'⌉`
//! fragments per node, where `t' = max(1, responsive_quorum − F − δ)`, and
//! finishes once `F+t'` nodes hold `f_per` each. A timer expiry shrinks `t'`
//! to what actually answered and tops every node up to the larger `f_per`.

use std::collections::BTreeSet;
use std::ops::Range;

use super::message::ShardList;
use super::{
    fragments_per_node, Body, ClusterConfig, NodeId, Payload, ProtocolError, ProtocolMessage,
    PruneRule, StorageNode,
};
use crate::codec::MessageId;

/// What the caller should do with the dispersal's round timer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TimerAction {
    #[default]
    Unchanged,
    /// (Re)start the timer for the full timeout.
    Arm,
    Cancel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Completion {
    pub id: MessageId,
    pub retransmission_rounds: u32,
}

#[derive(Debug, Clone)]
pub struct Reaction<S> {
    pub messages: Vec<ProtocolMessage<S>>,
    pub completed: Option<Completion>,
    pub timer: TimerAction,
}

impl<S> Default for Reaction<S> {
    fn default() -> Self {
        Self {
            messages: Vec::new(),
            completed: None,
            timer: TimerAction::Unchanged,
        }
    }
}

/// Coding configuration recorded for one message.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Scheme {
    pub data_shards: usize,
    pub parity_shards: usize,
    pub generation: u32,
}

type ShardOf<P> = <P as Payload>::Shard;

/// A leader colocated with storage node 0, driving dispersals to nodes `1..N`.
pub trait DispersalLeader {
    type Payload: Payload;

    fn begin(
        &mut self,
        id: MessageId,
        payload: Self::Payload,
    ) -> Result<Reaction<ShardOf<Self::Payload>>, ProtocolError>;

    fn on_ack(
        &mut self,
        from: NodeId,
        id: MessageId,
        generation: u32,
        held: u16,
    ) -> Result<Reaction<ShardOf<Self::Payload>>, ProtocolError>;

    fn on_timeout(
        &mut self,
        id: MessageId,
    ) -> Result<Reaction<ShardOf<Self::Payload>>, ProtocolError>;

    /// The leader's own fragment store.
    fn local_store(&self) -> &StorageNode<ShardOf<Self::Payload>>;

    fn is_done(&self, id: MessageId) -> bool;

    fn scheme(&self, id: MessageId) -> Option<Scheme>;

    /// Data shards of generation `generation` of message `id`'s code.
    fn data_shards(&self, id: MessageId, generation: u32) -> Option<usize>;

    /// A storage node configured the way this strategy's followers need.
    fn storage_node(&self, node: NodeId) -> StorageNode<ShardOf<Self::Payload>>;

    /// The leader's own check that its ack set survives `F` crashes, for
    /// strategies that keep enough bookkeeping to tell.
    fn dispersal_safe(&self, _id: MessageId) -> Option<bool> {
        None
    }

    /// Routes an inbound message; only acks are meaningful to a leader.
    fn handle(
        &mut self,
        msg: ProtocolMessage<ShardOf<Self::Payload>>,
    ) -> Result<Reaction<ShardOf<Self::Payload>>, ProtocolError> {
        match msg.body {
            Body::Ack {
                id,
                generation,
                held,
            } => self.on_ack(msg.from, id, generation, held),
            _ => Ok(Reaction::default()),
        }
    }
}

/// Acks from a caught-up node that trigger at most this many resent entries.
const BACKFILL_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Active,
    Done,
}

#[derive(Debug)]
struct Dispersal<P> {
    payload: P,
    sent: Vec<u16>,
    held: Vec<u16>,
    acked: Vec<bool>,
    ack_count: usize,
    /// Frozen at `Done` for late-ack accounting.
    f_per: usize,
    t_prime: usize,
    phase: Phase,
    timeouts: u32,
}

impl<P> Dispersal<P> {
    fn record_held(&mut self, node: usize, held: u16) {
        if held > self.held[node] {
            self.held[node] = held;
        }
        if !self.acked[node] && self.held[node] as usize >= self.f_per {
            self.acked[node] = true;
            self.ack_count += 1;
        }
    }

    fn exit_reached(&self, max_faults: usize) -> bool {
        assert!(
            self.f_per * self.t_prime > max_faults,
            "f_per·t' = {}·{} below F+1",
            self.f_per,
            self.t_prime
        );
        self.ack_count >= max_faults + self.t_prime
    }
}

#[derive(Debug)]
pub struct EaidLeader<P: Payload> {
    cfg: ClusterConfig,
    responsive_quorum: usize,
    latest: Option<MessageId>,
    slots: Vec<Option<Dispersal<P>>>,
    local: StorageNode<P::Shard>,
    rule: PruneRule,
    /// Per node: finished dispersals it is missing from.
    lagging: Vec<BTreeSet<u64>>,
    /// Per node: lagging entries resent and not yet acknowledged.
    backfill: Vec<BTreeSet<u64>>,
}

impl<P: Payload> EaidLeader<P> {
    pub fn new(cfg: ClusterConfig, rule: PruneRule) -> Self {
        let n = cfg.n_nodes();
        let block = block(&cfg, 0);
        Self {
            cfg,
            responsive_quorum: n,
            latest: None,
            slots: Vec::new(),
            local: StorageNode::new(NodeId::LEADER, cfg.max_faults(), block, rule),
            rule,
            lagging: vec![BTreeSet::new(); n],
            backfill: vec![BTreeSet::new(); n],
        }
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.cfg
    }

    pub fn responsive_quorum(&self) -> usize {
        self.responsive_quorum
    }

    fn dispersal(&self, id: MessageId) -> Option<&Dispersal<P>> {
        self.slots.get(id.0 as usize)?.as_ref()
    }

    pub fn f_per(&self, id: MessageId) -> Option<usize> {
        self.dispersal(id).map(|d| d.f_per)
    }

    pub fn t_prime(&self, id: MessageId) -> Option<usize> {
        self.dispersal(id).map(|d| d.t_prime)
    }

    pub fn ack_count(&self, id: MessageId) -> usize {
        self.dispersal(id).map_or(0, |d| d.ack_count)
    }

    pub fn in_ack_set(&self, id: MessageId, node: NodeId) -> bool {
        self.dispersal(id).is_some_and(|d| d.acked[node.0])
    }

    pub fn held(&self, id: MessageId, node: NodeId) -> u16 {
        self.dispersal(id).map_or(0, |d| d.held[node.0])
    }

    pub fn sent(&self, id: MessageId, node: NodeId) -> u16 {
        self.dispersal(id).map_or(0, |d| d.sent[node.0])
    }

    pub fn timeouts(&self, id: MessageId) -> u32 {
        self.dispersal(id).map_or(0, |d| d.timeouts)
    }

    /// Whether the ack set, as the leader counts it, survives the loss of any
    /// `F` of its members with `F+1` distinct fragments left.
    pub fn ack_set_safe(&self, id: MessageId) -> bool {
        let Some(d) = self.dispersal(id) else {
            return false;
        };
        let mut held: Vec<usize> = (0..self.cfg.n_nodes())
            .filter(|&j| d.acked[j])
            .map(|j| d.held[j] as usize)
            .collect();
        held.sort_unstable_by(|a, b| b.cmp(a));
        let survivors: usize = held.iter().skip(self.cfg.max_faults()).sum();
        survivors > self.cfg.max_faults()
    }

    fn take(&mut self, id: MessageId) -> Option<Dispersal<P>> {
        self.slots.get_mut(id.0 as usize)?.take()
    }

    fn put(&mut self, id: MessageId, d: Dispersal<P>) {
        let i = id.0 as usize;
        if i >= self.slots.len() {
            self.slots.resize_with(i + 1, || None);
        }
        self.slots[i] = Some(d);
    }

    /// Sends `S_node[range]` (or stores it locally for node 0).
    fn send_slice(
        &mut self,
        d: &mut Dispersal<P>,
        id: MessageId,
        node: usize,
        range: Range<usize>,
        out: &mut Vec<ProtocolMessage<P::Shard>>,
    ) -> Result<(), ProtocolError> {
        let k = self.cfg.max_faults() + 1;
        let total = k * self.cfg.n_nodes();
        let base = node * k;
        d.sent[node] = d.sent[node].max(range.end as u16);
        let fragments: ShardList<P::Shard> = range
            .map(|s| d.payload.shard(id, k, total, base + s))
            .collect::<Result<_, _>>()?;
        if node == NodeId::LEADER.0 {
            let (_, held) = self.local.on_disseminate(id, 0, fragments)?;
            d.record_held(node, held);
        } else {
            out.push(ProtocolMessage {
                from: NodeId::LEADER,
                to: NodeId(node),
                body: Body::Disseminate {
                    id,
                    generation: 0,
                    fragments,
                },
            });
        }
        Ok(())
    }

    /// Tells every node (and the local store) that `quorum` nodes hold fragments.
    fn broadcast_update(
        &mut self,
        id: MessageId,
        quorum: usize,
        out: &mut Vec<ProtocolMessage<P::Shard>>,
    ) {
        self.local.on_ack_update(id, quorum as u16);
        for j in 1..self.cfg.n_nodes() {
            out.push(ProtocolMessage {
                from: NodeId::LEADER,
                to: NodeId(j),
                body: Body::AckUpdate {
                    id,
                    quorum: quorum as u16,
                },
            });
        }
    }

    fn finish(&mut self, id: MessageId, d: &mut Dispersal<P>, r: &mut Reaction<P::Shard>) {
        d.phase = Phase::Done;
        self.responsive_quorum = d.ack_count;
        for j in 1..self.cfg.n_nodes() {
            if !d.acked[j] {
                self.lagging[j].insert(id.0);
            }
        }
        // Lets nodes prune from f_per down to r(|A|) without waiting for a late ack.
        self.broadcast_update(id, d.ack_count, &mut r.messages);
        r.completed = Some(Completion {
            id,
            retransmission_rounds: d.timeouts,
        });
        r.timer = TimerAction::Cancel;
    }

    /// Resends lagging entries to `node`, which has just shown it is reachable.
    fn backfill(
        &mut self,
        node: usize,
        acked: MessageId,
        out: &mut Vec<ProtocolMessage<P::Shard>>,
    ) -> Result<(), ProtocolError> {
        let was_in_batch = self.backfill[node].remove(&acked.0);
        let in_flight = !self.backfill[node].is_empty();
        // Late duplicates from an earlier batch must not resend the current one.
        let stale =
            in_flight && !was_in_batch && self.backfill[node].last().is_some_and(|&l| acked.0 < l);
        if self.lagging[node].is_empty() || (was_in_batch && in_flight) || stale {
            return Ok(());
        }
        let batch: Vec<u64> = self.lagging[node]
            .iter()
            .take(BACKFILL_BATCH)
            .copied()
            .collect();
        self.backfill[node] = batch.iter().copied().collect();
        for raw in batch {
            let id = MessageId(raw);
            let mut d = self.take(id).expect("lagging entries are tracked");
            let f = d.f_per;
            let res = self.send_slice(&mut d, id, node, 0..f, out);
            self.put(id, d);
            res?;
        }
        Ok(())
    }
}

fn block(cfg: &ClusterConfig, node: usize) -> Range<usize> {
    let k = cfg.max_faults() + 1;
    node * k..(node + 1) * k
}

impl<P: Payload> DispersalLeader for EaidLeader<P> {
    type Payload = P;

    fn begin(&mut self, id: MessageId, payload: P) -> Result<Reaction<P::Shard>, ProtocolError> {
        if self.dispersal(id).is_some() {
            return Err(ProtocolError::DuplicateDispersal(id));
        }
        let (n, f) = (self.cfg.n_nodes(), self.cfg.max_faults());
        let t = self.responsive_quorum.saturating_sub(f);
        let t_prime = t.saturating_sub(self.cfg.delta()).max(1);
        let f_per = fragments_per_node(f, t_prime);
        let mut d = Dispersal {
            payload,
            sent: vec![0; n],
            held: vec![0; n],
            acked: vec![false; n],
            ack_count: 0,
            f_per,
            t_prime,
            phase: Phase::Active,
            timeouts: 0,
        };
        let mut r = Reaction {
            timer: TimerAction::Arm,
            ..Reaction::default()
        };
        for j in 0..n {
            self.send_slice(&mut d, id, j, 0..f_per, &mut r.messages)?;
        }
        self.latest = Some(id);
        if d.exit_reached(f) {
            self.finish(id, &mut d, &mut r);
        }
        self.put(id, d);
        Ok(r)
    }

    fn on_ack(
        &mut self,
        from: NodeId,
        id: MessageId,
        generation: u32,
        held: u16,
    ) -> Result<Reaction<P::Shard>, ProtocolError> {
        let mut r = Reaction::default();
        if generation != 0 || from.0 >= self.cfg.n_nodes() {
            return Ok(r);
        }
        let Some(mut d) = self.take(id) else {
            return Ok(r);
        };
        match d.phase {
            Phase::Active => {
                d.record_held(from.0, held);
                if d.exit_reached(self.cfg.max_faults()) {
                    self.finish(id, &mut d, &mut r);
                }
            }
            Phase::Done => {
                let before = d.ack_count;
                d.record_held(from.0, held);
                if d.ack_count > before {
                    self.lagging[from.0].remove(&id.0);
                    if self.latest == Some(id) {
                        self.responsive_quorum = d.ack_count;
                    }
                    // Update nodes so they can prune.
                    self.broadcast_update(id, d.ack_count, &mut r.messages);
                }
            }
        }
        self.put(id, d);
        self.backfill(from.0, id, &mut r.messages)?;
        Ok(r)
    }

    fn on_timeout(&mut self, id: MessageId) -> Result<Reaction<P::Shard>, ProtocolError> {
        let mut r = Reaction::default();
        let Some(mut d) = self.take(id) else {
            return Ok(r);
        };
        if d.phase == Phase::Done {
            self.put(id, d);
            return Ok(r);
        }
        let (n, f) = (self.cfg.n_nodes(), self.cfg.max_faults());
        d.timeouts += 1;
        let t_new = d.ack_count.saturating_sub(f).max(1);
        let f_new = fragments_per_node(f, t_new);
        d.t_prime = t_new;
        d.f_per = f_new;
        // Recompute the ack set under the new threshold.
        d.ack_count = 0;
        for j in 0..n {
            d.acked[j] = false;
            let held = d.held[j];
            d.record_held(j, held);
        }
        let mut result = Ok(());
        for j in 0..n {
            let sent = d.sent[j] as usize;
            if f_new > sent {
                result = result.and(self.send_slice(&mut d, id, j, sent..f_new, &mut r.messages));
            }
        }
        if let Err(e) = result {
            self.put(id, d);
            return Err(e);
        }
        if d.exit_reached(f) {
            self.finish(id, &mut d, &mut r);
        } else {
            r.timer = TimerAction::Arm;
        }
        self.put(id, d);
        Ok(r)
    }

    fn local_store(&self) -> &StorageNode<P::Shard> {
        &self.local
    }

    fn is_done(&self, id: MessageId) -> bool {
        self.dispersal(id).is_some_and(|d| d.phase == Phase::Done)
    }

    fn scheme(&self, id: MessageId) -> Option<Scheme> {
        self.dispersal(id)?;
        let k = self.cfg.max_faults() + 1;
        Some(Scheme {
            data_shards: k,
            parity_shards: k * (self.cfg.n_nodes() - 1),
            generation: 0,
        })
    }

    fn data_shards(&self, id: MessageId, generation: u32) -> Option<usize> {
        (generation == 0 && self.dispersal(id).is_some()).then_some(self.cfg.max_faults() + 1)
    }

    fn storage_node(&self, node: NodeId) -> StorageNode<P::Shard> {
        StorageNode::new(
            node,
            self.cfg.max_faults(),
            block(&self.cfg, node.0),
            self.rule,
        )
    }

    fn dispersal_safe(&self, id: MessageId) -> Option<bool> {
        Some(self.ack_set_safe(id))
    }
}
