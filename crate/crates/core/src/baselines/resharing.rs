use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{deliver, Slots};
use crate::codec::MessageId;
use crate::protocol::{
    ClusterConfig, Completion, DispersalLeader, NodeId, Payload, ProtocolError, Reaction, Scheme,
    StorageNode, TimerAction,
};

#[derive(Debug)]
struct Entry<P> {
    payload: P,
    held: Vec<u16>,
    acked: usize,
    /// Per node: fragment indices copied to it, with the count it must then hold.
    copies: Vec<Vec<usize>>,
    expected: Vec<u16>,
    resharing: bool,
    done: bool,
    timeouts: u32,
}

impl<P> Entry<P> {
    fn targets_satisfied(&self) -> bool {
        self.expected
            .iter()
            .zip(&self.held)
            .all(|(&want, &have)| have >= want)
    }
}

/// Waits for every node to ack its coded fragment; on a miss, sends copies of
/// each missing node's fragment to `F` randomly chosen responsive nodes.
#[derive(Debug)]
pub struct Resharing<P: Payload> {
    cfg: ClusterConfig,
    entries: Slots<Entry<P>>,
    local: StorageNode<P::Shard>,
    rng: ChaCha8Rng,
}

impl<P: Payload> Resharing<P> {
    pub fn new(cfg: ClusterConfig, seed: u64) -> Self {
        Self {
            cfg,
            entries: Slots::default(),
            local: StorageNode::unchecked(NodeId::LEADER, cfg.max_faults()),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn code(&self) -> (usize, usize) {
        (self.cfg.max_faults() + 1, self.cfg.n_nodes())
    }

    fn send(
        &mut self,
        e: &mut Entry<P>,
        id: MessageId,
        node: usize,
        indices: Vec<usize>,
        r: &mut Reaction<P::Shard>,
    ) -> Result<(), ProtocolError> {
        let code = self.code();
        let stored = deliver(
            &mut e.payload,
            &mut self.local,
            id,
            0,
            code,
            node,
            indices,
            &mut r.messages,
        )?;
        if let Some(held) = stored {
            record(e, 0, held);
        }
        Ok(())
    }

    fn check_done(&self, id: MessageId, e: &mut Entry<P>, r: &mut Reaction<P::Shard>) {
        let all_acked = e.acked == self.cfg.n_nodes();
        if !e.done && (all_acked || (e.resharing && e.targets_satisfied())) {
            e.done = true;
            e.copies = Vec::new();
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

    /// Picks copy targets for every missing node among the nodes that answered.
    fn plan_copies(&mut self, e: &mut Entry<P>) {
        let n = self.cfg.n_nodes();
        let responsive: Vec<usize> = (0..n).filter(|&j| e.held[j] > 0).collect();
        let missing: Vec<usize> = (0..n).filter(|&j| e.held[j] == 0).collect();
        let wanted = self.cfg.max_faults().min(responsive.len());
        for m in missing {
            for pick in sample(&mut self.rng, responsive.len(), wanted) {
                e.copies[responsive[pick]].push(m);
            }
        }
        for j in 0..n {
            if !e.copies[j].is_empty() {
                e.expected[j] = 1 + e.copies[j].len() as u16;
            }
        }
        e.resharing = true;
    }
}

fn record<P>(e: &mut Entry<P>, node: usize, held: u16) {
    if e.held[node] == 0 && held > 0 {
        e.acked += 1;
    }
    e.held[node] = e.held[node].max(held);
}

impl<P: Payload> DispersalLeader for Resharing<P> {
    type Payload = P;

    fn begin(&mut self, id: MessageId, payload: P) -> Result<Reaction<P::Shard>, ProtocolError> {
        if self.entries.get(id).is_some() {
            return Err(ProtocolError::DuplicateDispersal(id));
        }
        let n = self.cfg.n_nodes();
        let mut e = Entry {
            payload,
            held: vec![0; n],
            acked: 0,
            copies: vec![Vec::new(); n],
            expected: vec![0; n],
            resharing: false,
            done: false,
            timeouts: 0,
        };
        let mut r = Reaction {
            timer: TimerAction::Arm,
            ..Reaction::default()
        };
        let mut res = Ok(());
        for j in 0..n {
            res = res.and(self.send(&mut e, id, j, vec![j], &mut r));
        }
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
            if generation == 0 && from.0 < this.cfg.n_nodes() {
                record(e, from.0, held);
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
            if !e.resharing {
                this.plan_copies(e);
            }
            for j in 0..this.cfg.n_nodes() {
                if e.held[j] < e.expected[j] {
                    let copies = e.copies[j].clone();
                    this.send(e, id, j, copies, r)?;
                }
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
        self.entries.get(id)?;
        let (k, n) = self.code();
        Some(Scheme {
            data_shards: k,
            parity_shards: n - k,
            generation: 0,
        })
    }

    fn data_shards(&self, id: MessageId, generation: u32) -> Option<usize> {
        (generation == 0 && self.entries.get(id).is_some()).then(|| self.code().0)
    }

    fn storage_node(&self, node: NodeId) -> StorageNode<P::Shard> {
        StorageNode::unchecked(node, self.cfg.max_faults())
    }
}
