use super::{deliver, Slots};
use crate::codec::MessageId;
use crate::protocol::{
    ClusterConfig, Completion, DispersalLeader, NodeId, Payload, ProtocolError, Reaction, Scheme,
    StorageNode, TimerAction,
};

const CODED: u32 = 0;
const FULL_COPY: u32 = 1;

#[derive(Debug)]
struct Entry<P> {
    payload: P,
    generation: u32,
    acked: Vec<bool>,
    ack_count: usize,
    done: bool,
    timeouts: u32,
}

/// Waits for every node to ack its coded fragment; on a miss, replicates the
/// full message everywhere and finishes at `F+1` full copies.
#[derive(Debug)]
pub struct FullFallback<P: Payload> {
    cfg: ClusterConfig,
    entries: Slots<Entry<P>>,
    local: StorageNode<P::Shard>,
}

impl<P: Payload> FullFallback<P> {
    pub fn new(cfg: ClusterConfig) -> Self {
        Self {
            cfg,
            entries: Slots::default(),
            local: StorageNode::unchecked(NodeId::LEADER, cfg.max_faults()),
        }
    }

    fn code(&self, generation: u32) -> (usize, usize) {
        match generation {
            CODED => (self.cfg.max_faults() + 1, self.cfg.n_nodes()),
            _ => (1, 1),
        }
    }

    fn needed(&self, generation: u32) -> usize {
        match generation {
            CODED => self.cfg.n_nodes(),
            _ => self.cfg.max_faults() + 1,
        }
    }

    /// Sends the current generation's shard to each node in `nodes`.
    fn send(
        &mut self,
        e: &mut Entry<P>,
        id: MessageId,
        nodes: impl IntoIterator<Item = usize>,
        r: &mut Reaction<P::Shard>,
    ) -> Result<(), ProtocolError> {
        let code = self.code(e.generation);
        for j in nodes {
            let index = if e.generation == CODED { j } else { 0 };
            let stored = deliver(
                &mut e.payload,
                &mut self.local,
                id,
                e.generation,
                code,
                j,
                [index],
                &mut r.messages,
            )?;
            if stored.is_some() {
                self.record(e, 0);
            }
        }
        Ok(())
    }

    fn record(&self, e: &mut Entry<P>, node: usize) {
        if !e.acked[node] {
            e.acked[node] = true;
            e.ack_count += 1;
        }
    }

    fn check_done(&self, id: MessageId, e: &mut Entry<P>, r: &mut Reaction<P::Shard>) {
        if !e.done && e.ack_count >= self.needed(e.generation) {
            e.done = true;
            r.completed = Some(Completion {
                id,
                retransmission_rounds: e.timeouts,
            });
            r.timer = TimerAction::Cancel;
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

impl<P: Payload> DispersalLeader for FullFallback<P> {
    type Payload = P;

    fn begin(&mut self, id: MessageId, payload: P) -> Result<Reaction<P::Shard>, ProtocolError> {
        if self.entries.get(id).is_some() {
            return Err(ProtocolError::DuplicateDispersal(id));
        }
        let n = self.cfg.n_nodes();
        let mut e = Entry {
            payload,
            generation: CODED,
            acked: vec![false; n],
            ack_count: 0,
            done: false,
            timeouts: 0,
        };
        let mut r = Reaction {
            timer: TimerAction::Arm,
            ..Reaction::default()
        };
        let res = self.send(&mut e, id, 0..n, &mut r);
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
            if generation == e.generation && held > 0 && from.0 < this.cfg.n_nodes() {
                this.record(e, from.0);
                this.check_done(id, e, r);
            }
            Ok(())
        })
    }

    fn on_timeout(&mut self, id: MessageId) -> Result<Reaction<P::Shard>, ProtocolError> {
        self.with_entry(id, |this, e, r| {
            if e.done {
                return Ok(());
            }
            e.timeouts += 1;
            let n = this.cfg.n_nodes();
            if e.generation == CODED {
                // The leader switches to full-copy replication on every node.
                e.generation = FULL_COPY;
                e.acked.iter_mut().for_each(|a| *a = false);
                e.ack_count = 0;
                this.send(e, id, 0..n, r)?;
            } else {
                let missing: Vec<usize> = (1..n).filter(|&j| !e.acked[j]).collect();
                this.send(e, id, missing, r)?;
            }
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
        let (k, n) = self.code(e.generation);
        Some(Scheme {
            data_shards: k,
            parity_shards: n - k,
            generation: e.generation,
        })
    }

    fn data_shards(&self, id: MessageId, generation: u32) -> Option<usize> {
        let e = self.entries.get(id)?;
        (generation <= e.generation).then(|| self.code(generation).0)
    }

    fn storage_node(&self, node: NodeId) -> StorageNode<P::Shard> {
        StorageNode::unchecked(node, self.cfg.max_faults())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{Body, SizedMessage};

    fn leader() -> FullFallback<SizedMessage> {
        FullFallback::new(ClusterConfig::new(5, 2, 0).unwrap())
    }

    #[test]
    fn all_ack_commits_coded() {
        let mut l = leader();
        let id = MessageId(0);
        let r = l.begin(id, SizedMessage { len: 3000 }).unwrap();
        assert_eq!(r.messages.len(), 4);
        for j in 1..4 {
            assert!(l.on_ack(NodeId(j), id, 0, 1).unwrap().completed.is_none());
        }
        let done = l.on_ack(NodeId(4), id, 0, 1).unwrap().completed.unwrap();
        assert_eq!(done.retransmission_rounds, 0);
        assert_eq!(l.local_store().stored_bytes(id), 1000);
    }

    #[test]
    fn one_miss_falls_back_to_full_copies() {
        let mut l = leader();
        let id = MessageId(0);
        l.begin(id, SizedMessage { len: 3000 }).unwrap();
        for j in 1..4 {
            l.on_ack(NodeId(j), id, 0, 1).unwrap();
        }
        let r = l.on_timeout(id).unwrap();
        assert_eq!(r.messages.len(), 4);
        assert!(r.messages.iter().all(|m| matches!(
            &m.body,
            Body::Disseminate { generation: 1, fragments, .. } if fragments[0].bytes == 3000
        )));
        assert_eq!(l.local_store().stored_bytes(id), 3000);
        // A stale coded ack no longer counts.
        assert!(l.on_ack(NodeId(4), id, 0, 1).unwrap().completed.is_none());
        l.on_ack(NodeId(1), id, 1, 1).unwrap();
        let done = l.on_ack(NodeId(2), id, 1, 1).unwrap().completed.unwrap();
        assert_eq!(done.retransmission_rounds, 1);
        assert_eq!(l.scheme(id).unwrap().data_shards, 1);
    }
}
