use super::{deliver, Slots};
use crate::codec::MessageId;
use crate::protocol::{
    ClusterConfig, Completion, DispersalLeader, NodeId, Payload, ProtocolError, Reaction, Scheme,
    StorageNode, TimerAction,
};

#[derive(Debug)]
struct Entry<P> {
    payload: P,
    generation: u32,
    data_shards: usize,
    /// Data shards of every generation sent so far.
    history: Vec<usize>,
    needed: usize,
    acked: Vec<bool>,
    ack_count: usize,
    /// The first round's timer has fired and fed the estimate.
    sampled: bool,
    done: bool,
    timeouts: u32,
}

/// Encodes each entry for the responsive count observed on the previous one:
/// with an estimate of `c` responsive nodes it uses `k = F+1−(N−c)` data
/// shards, one fragment per node, and waits for `max(c, F+1)` acks.
///
/// The round timer keeps running after completion: the number of first-round
/// acks at expiry becomes the next entry's estimate.
#[derive(Debug)]
pub struct Proactive<P: Payload> {
    cfg: ClusterConfig,
    estimate: usize,
    entries: Slots<Entry<P>>,
    local: StorageNode<P::Shard>,
}

impl<P: Payload> Proactive<P> {
    pub fn new(cfg: ClusterConfig) -> Self {
        Self {
            cfg,
            estimate: cfg.n_nodes(),
            entries: Slots::default(),
            local: StorageNode::unchecked(NodeId::LEADER, cfg.max_faults()),
        }
    }

    pub fn estimate(&self) -> usize {
        self.estimate
    }

    /// `(k, needed acks)` for an estimated `responsive` count.
    fn plan(&self, responsive: usize) -> (usize, usize) {
        let (n, f) = (self.cfg.n_nodes(), self.cfg.max_faults());
        let absent = n - responsive.min(n);
        ((f + 1).saturating_sub(absent).max(1), responsive.max(f + 1))
    }

    /// Encodes the entry's current generation and sends fragment `j` to node `j`.
    fn send_round(
        &mut self,
        e: &mut Entry<P>,
        id: MessageId,
        r: &mut Reaction<P::Shard>,
    ) -> Result<(), ProtocolError> {
        let n = self.cfg.n_nodes();
        e.acked.iter_mut().for_each(|a| *a = false);
        e.ack_count = 0;
        for j in 0..n {
            let stored = deliver(
                &mut e.payload,
                &mut self.local,
                id,
                e.generation,
                (e.data_shards, n),
                j,
                [j],
                &mut r.messages,
            )?;
            if stored.is_some() {
                e.acked[0] = true;
                e.ack_count += 1;
            }
        }
        Ok(())
    }

    fn check_done(&self, id: MessageId, e: &mut Entry<P>, r: &mut Reaction<P::Shard>) {
        if !e.done && e.ack_count >= e.needed {
            e.done = true;
            r.completed = Some(Completion {
                id,
                retransmission_rounds: e.timeouts,
            });
            if e.sampled {
                r.timer = TimerAction::Cancel;
            }
        }
    }

    fn with_entry(
        &mut self,
        id: MessageId,
        f: impl FnOnce(&mut Self, &mut Entry<P>, &mut Reaction<P::Shard>) -> Result<(), ProtocolError>,
    ) -> Result<Reaction<P::Shard>, ProtocolError> {
        let mut r = Reaction::default();
        if let Some(mut e) = self.entries.take(id) {
            let res = f(self, &mut e, &mut r);
            self.entries.put(id, e);
            res?;
        }
        Ok(r)
    }
}

impl<P: Payload> DispersalLeader for Proactive<P> {
    type Payload = P;

    fn begin(&mut self, id: MessageId, payload: P) -> Result<Reaction<P::Shard>, ProtocolError> {
        if self.entries.get(id).is_some() {
            return Err(ProtocolError::DuplicateDispersal(id));
        }
        let (data_shards, needed) = self.plan(self.estimate);
        let mut e = Entry {
            payload,
            generation: 0,
            data_shards,
            history: vec![data_shards],
            needed,
            acked: vec![false; self.cfg.n_nodes()],
            ack_count: 0,
            sampled: false,
            done: false,
            timeouts: 0,
        };
        let mut r = Reaction {
            timer: TimerAction::Arm,
            ..Reaction::default()
        };
        let res = self.send_round(&mut e, id, &mut r);
        self.entries.put(id, e);
        res?;
        Ok(r)
    }

    fn on_ack(
        &mut self,
        from: NodeId,
        id: MessageId,
        generation: u32,
        held: u16,
    ) -> Result<Reaction<P::Shard>, ProtocolError> {
        self.with_entry(id, |this, e, r| {
            let n = this.cfg.n_nodes();
            if generation == e.generation && held > 0 && from.0 < n && !e.acked[from.0] {
                e.acked[from.0] = true;
                e.ack_count += 1;
                this.check_done(id, e, r);
            }
            Ok(())
        })
    }

    fn on_timeout(&mut self, id: MessageId) -> Result<Reaction<P::Shard>, ProtocolError> {
        self.with_entry(id, |this, e, r| {
            let responded = e.ack_count;
            if !e.sampled {
                e.sampled = true;
                let f = this.cfg.max_faults();
                this.estimate = responded.clamp(f + 1, this.cfg.n_nodes());
            }
            if e.done {
                return Ok(());
            }
            // Re-sample: re-encode for the count that answered this round.
            e.timeouts += 1;
            e.generation += 1;
            (e.data_shards, e.needed) = this.plan(responded);
            e.history.push(e.data_shards);
            this.send_round(e, id, r)?;
            this.check_done(id, e, r);
            if !e.done {
                r.timer = TimerAction::Arm;
            }
            Ok(())
        })
    }

    fn local_store(&self) -> &StorageNode<P::Shard> {
        &self.local
    }

    fn is_done(&self, id: MessageId) -> bool {
        self.entries.get(id).is_some_and(|e| e.done)
    }

    fn scheme(&self, id: MessageId) -> Option<Scheme> {
        let e = self.entries.get(id)?;
        Some(Scheme {
            data_shards: e.data_shards,
            parity_shards: self.cfg.n_nodes() - e.data_shards,
            generation: e.generation,
        })
    }

    fn data_shards(&self, id: MessageId, generation: u32) -> Option<usize> {
        self.entries
            .get(id)?
            .history
            .get(generation as usize)
            .copied()
    }

    fn storage_node(&self, node: NodeId) -> StorageNode<P::Shard> {
        StorageNode::unchecked(node, self.cfg.max_faults())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{Body, SizedMessage};

    fn leader() -> Proactive<SizedMessage> {
        Proactive::new(ClusterConfig::new(5, 2, 0).unwrap())
    }

    #[test]
    fn steady_state_uses_f_plus_one_data_shards() {
        let mut l = leader();
        let id = MessageId(0);
        l.begin(id, SizedMessage { len: 3000 }).unwrap();
        assert_eq!(l.scheme(id).unwrap().data_shards, 3);
        let mut done = None;
        for j in 1..5 {
            done = l.on_ack(NodeId(j), id, 0, 1).unwrap().completed;
        }
        let done = done.unwrap();
        assert_eq!(done.retransmission_rounds, 0);
        // Timer still runs to sample the estimate.
        let r = l.on_timeout(id).unwrap();
        assert!(r.messages.is_empty());
        assert_eq!(l.estimate(), 5);
    }

    #[test]
    fn two_absent_degenerates_to_replication() {
        let mut l = leader();
        l.estimate = 3;
        let id = MessageId(0);
        l.begin(id, SizedMessage { len: 3000 }).unwrap();
        let s = l.scheme(id).unwrap();
        assert_eq!((s.data_shards, s.parity_shards), (1, 4));
        assert_eq!(l.local_store().stored_bytes(id), 3000);
    }

    #[test]
    fn miss_re_encodes_for_observed_count() {
        let mut l = leader();
        let id = MessageId(0);
        l.begin(id, SizedMessage { len: 3000 }).unwrap();
        for j in 1..4 {
            l.on_ack(NodeId(j), id, 0, 1).unwrap();
        }
        let r = l.on_timeout(id).unwrap();
        assert_eq!(l.estimate(), 4);
        let s = l.scheme(id).unwrap();
        assert_eq!((s.data_shards, s.generation), (2, 1));
        assert!(r.messages.iter().all(|m| matches!(
            &m.body,
            Body::Disseminate { generation: 1, fragments, .. } if fragments[0].bytes == 1500
        )));
        assert_eq!(r.timer, TimerAction::Arm);
        for j in 1..3 {
            assert!(l.on_ack(NodeId(j), id, 1, 1).unwrap().completed.is_none());
        }
        let done = l.on_ack(NodeId(4), id, 1, 1).unwrap().completed.unwrap();
        assert_eq!(done.retransmission_rounds, 1);
    }
}
