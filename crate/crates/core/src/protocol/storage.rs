//! A storage node: unions incoming fragments, acknowledges its count, and
//! prunes down to `r(Q)` when it learns a larger ack quorum.

use std::ops::Range;

use super::message::ShardList;
use super::{retained_fragments, Body, NodeId, ProtocolError, ProtocolMessage, Shard};
use crate::codec::MessageId;

/// How many fragments a node keeps once it knows `q` nodes hold theirs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PruneRule {
    /// `r(q) = ⌈(F+1)/(q−F)⌉`.
    #[default]
    Standard,
    /// `r(q) − 1`. Deliberately unsafe; exists so checkers can be shown to catch it.
    OneShort,
}

impl PruneRule {
    pub fn retain(self, max_faults: usize, quorum: usize) -> Option<usize> {
        let r = retained_fragments(max_faults, quorum)?;
        Some(match self {
            PruneRule::Standard => r,
            PruneRule::OneShort => r - 1,
        })
    }
}

#[derive(Debug, Clone)]
struct Slot<S> {
    generation: u32,
    quorum: u16,
    /// Sorted by index.
    shards: ShardList<S>,
}

impl<S> Default for Slot<S> {
    fn default() -> Self {
        Self {
            generation: 0,
            quorum: 0,
            shards: ShardList::new(),
        }
    }
}

/// Per-node fragment store, indexed densely by message id.
#[derive(Debug, Clone)]
pub struct StorageNode<S> {
    id: NodeId,
    max_faults: usize,
    block: Option<Range<usize>>,
    rule: PruneRule,
    slots: Vec<Slot<S>>,
    total_bytes: u64,
}

impl<S: Shard> StorageNode<S> {
    /// An eAID node: accepts only fragments of `block`.
    pub fn new(id: NodeId, max_faults: usize, block: Range<usize>, rule: PruneRule) -> Self {
        Self {
            id,
            max_faults,
            block: Some(block),
            rule,
            slots: Vec::new(),
            total_bytes: 0,
        }
    }

    /// A node for the baseline strategies, which ship fragments outside the
    /// eAID block layout.
    pub fn unchecked(id: NodeId, max_faults: usize) -> Self {
        Self {
            id,
            max_faults,
            block: None,
            rule: PruneRule::Standard,
            slots: Vec::new(),
            total_bytes: 0,
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    fn slot_mut(&mut self, id: MessageId) -> &mut Slot<S> {
        let i = id.0 as usize;
        if i >= self.slots.len() {
            self.slots.resize_with(i + 1, Slot::default);
        }
        &mut self.slots[i]
    }

    fn slot(&self, id: MessageId) -> Option<&Slot<S>> {
        self.slots.get(id.0 as usize)
    }

    /// Unions `fragments` into the store, capped at `r(Q[id])` once a quorum is
    /// known, and returns `(generation, held)` for the ack, counted before the
    /// cap. Fragments of an
    /// older generation are ignored; a newer one replaces what is held.
    pub fn on_disseminate(
        &mut self,
        id: MessageId,
        generation: u32,
        fragments: impl IntoIterator<Item = S>,
    ) -> Result<(u32, u16), ProtocolError> {
        let fragments: ShardList<S> = fragments.into_iter().collect();
        if let Some(block) = &self.block {
            if let Some(bad) = fragments
                .iter()
                .find(|s| !block.contains(&(s.index() as usize)))
            {
                return Err(ProtocolError::OutsideBlock {
                    node: self.id,
                    index: bad.index() as usize,
                });
            }
        }
        let mut delta: i64 = 0;
        let slot = self.slot_mut(id);
        if generation > slot.generation {
            delta -= slot
                .shards
                .iter()
                .map(|s| s.stored_bytes() as i64)
                .sum::<i64>();
            slot.shards.clear();
            slot.generation = generation;
        }
        if generation == slot.generation {
            for s in fragments {
                if let Err(pos) = slot.shards.binary_search_by_key(&s.index(), Shard::index) {
                    delta += s.stored_bytes() as i64;
                    slot.shards.insert(pos, s);
                }
            }
        }
        let reply = (slot.generation, slot.shards.len() as u16);
        self.total_bytes = (self.total_bytes as i64 + delta) as u64;
        // The ack reports what arrived, as if the AckUpdate came after it;
        // the store itself never grows past r(Q).
        self.prune(id);
        Ok(reply)
    }

    /// Raises `Q[id]` and prunes. Returns the number of fragments discarded.
    pub fn on_ack_update(&mut self, id: MessageId, quorum: u16) -> usize {
        let slot = self.slot_mut(id);
        if quorum <= slot.quorum {
            return 0;
        }
        slot.quorum = quorum;
        self.prune(id)
    }

    /// Drops fragments above `r(Q[id])`, highest index first.
    pub fn prune(&mut self, id: MessageId) -> usize {
        let (max_faults, rule) = (self.max_faults, self.rule);
        let Some(slot) = self.slots.get_mut(id.0 as usize) else {
            return 0;
        };
        let Some(keep) = rule.retain(max_faults, slot.quorum as usize) else {
            return 0;
        };
        let mut freed = 0u64;
        let mut dropped = 0;
        while slot.shards.len() > keep {
            let s = slot.shards.pop().unwrap();
            freed += s.stored_bytes();
            dropped += 1;
        }
        self.total_bytes -= freed;
        dropped
    }

    /// Handles a leader message, returning the ack to send back (if any).
    pub fn handle(
        &mut self,
        msg: ProtocolMessage<S>,
    ) -> Result<Option<ProtocolMessage<S>>, ProtocolError> {
        match msg.body {
            Body::Disseminate {
                id,
                generation,
                fragments,
            } => {
                let (generation, held) = self.on_disseminate(id, generation, fragments)?;
                Ok(Some(ProtocolMessage {
                    from: self.id,
                    to: msg.from,
                    body: Body::Ack {
                        id,
                        generation,
                        held,
                    },
                }))
            }
            Body::AckUpdate { id, quorum } => {
                self.on_ack_update(id, quorum);
                Ok(None)
            }
            Body::Ack { .. } => Ok(None),
        }
    }

    pub fn fragments(&self, id: MessageId) -> &[S] {
        self.slot(id).map_or(&[], |s| s.shards.as_slice())
    }

    pub fn generation(&self, id: MessageId) -> u32 {
        self.slot(id).map_or(0, |s| s.generation)
    }

    pub fn known_quorum(&self, id: MessageId) -> u16 {
        self.slot(id).map_or(0, |s| s.quorum)
    }

    pub fn stored_bytes(&self, id: MessageId) -> u64 {
        self.fragments(id).iter().map(Shard::stored_bytes).sum()
    }

    pub fn total_bytes(&self) -> u64 {
        self.total_bytes
    }

    /// One past the highest message id ever stored.
    pub fn id_bound(&self) -> u64 {
        self.slots.len() as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::ShardTag;

    fn tag(index: u16) -> ShardTag {
        ShardTag { index, bytes: 10 }
    }

    fn node() -> StorageNode<ShardTag> {
        // N=5, F=2: node 1 owns indices 3..6.
        StorageNode::new(NodeId(1), 2, 3..6, PruneRule::Standard)
    }

    #[test]
    fn union_and_ack_counts() {
        let mut n = node();
        assert_eq!(
            n.on_disseminate(MessageId(0), 0, [tag(3), tag(4)]).unwrap(),
            (0, 2)
        );
        assert_eq!(n.on_disseminate(MessageId(0), 0, [tag(5)]).unwrap(), (0, 3));
        assert_eq!(n.on_disseminate(MessageId(0), 0, [tag(5)]).unwrap(), (0, 3));
        assert_eq!(n.total_bytes(), 30);
    }

    #[test]
    fn rejects_foreign_fragments() {
        let mut n = node();
        assert_eq!(
            n.on_disseminate(MessageId(0), 0, [tag(3), tag(6)]),
            Err(ProtocolError::OutsideBlock {
                node: NodeId(1),
                index: 6
            })
        );
        assert!(n.fragments(MessageId(0)).is_empty());
    }

    #[test]
    fn prunes_highest_index_first() {
        let mut n = node();
        n.on_disseminate(MessageId(2), 0, [tag(5), tag(3), tag(4)])
            .unwrap();
        assert_eq!(n.on_ack_update(MessageId(2), 4), 1);
        let kept: Vec<u16> = n.fragments(MessageId(2)).iter().map(|s| s.index).collect();
        assert_eq!(kept, vec![3, 4]);
        assert_eq!(n.on_ack_update(MessageId(2), 5), 1);
        assert_eq!(n.fragments(MessageId(2))[0].index, 3);
        assert_eq!(n.total_bytes(), 10);
    }

    #[test]
    fn resend_after_prune_stays_pruned() {
        let mut n = node();
        n.on_disseminate(MessageId(1), 0, [tag(3), tag(4), tag(5)])
            .unwrap();
        n.on_ack_update(MessageId(1), 5);
        let (_, held) = n
            .on_disseminate(MessageId(1), 0, [tag(3), tag(4), tag(5)])
            .unwrap();
        assert_eq!(held, 3);
        assert_eq!(n.fragments(MessageId(1)).len(), 1);
        assert_eq!(n.total_bytes(), 10);
    }

    #[test]
    fn stale_or_small_quorums_do_not_prune() {
        let mut n = node();
        n.on_disseminate(MessageId(0), 0, [tag(3), tag(4), tag(5)])
            .unwrap();
        assert_eq!(n.on_ack_update(MessageId(0), 2), 0);
        assert_eq!(n.on_ack_update(MessageId(0), 3), 0);
        assert_eq!(n.known_quorum(MessageId(0)), 3);
        n.on_ack_update(MessageId(0), 5);
        assert_eq!(n.on_ack_update(MessageId(0), 4), 0);
        assert_eq!(n.known_quorum(MessageId(0)), 5);
        assert_eq!(n.fragments(MessageId(0)).len(), 1);
    }

    #[test]
    fn newer_generation_replaces_older() {
        let mut n: StorageNode<ShardTag> = StorageNode::unchecked(NodeId(3), 2);
        n.on_disseminate(MessageId(0), 0, [tag(3)]).unwrap();
        let full = ShardTag {
            index: 0,
            bytes: 30,
        };
        assert_eq!(n.on_disseminate(MessageId(0), 1, [full]).unwrap(), (1, 1));
        assert_eq!(n.total_bytes(), 30);
        assert_eq!(n.on_disseminate(MessageId(0), 0, [tag(4)]).unwrap(), (1, 1));
    }

    #[test]
    fn one_short_rule_under_retains() {
        assert_eq!(PruneRule::OneShort.retain(2, 4), Some(1));
        assert_eq!(PruneRule::Standard.retain(2, 4), Some(2));
    }
}
