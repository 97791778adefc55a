//! Prior dispersal strategies, driven through the same leader interface and
//! message plumbing as eAID so runs can be compared entry by entry.
//!
//! All three send one fragment of an `(F+1, F)` code to every node first. They
//! differ in what happens when an ack misses the timeout:
//!
//! - [`FullFallback`] re-sends the whole message to every node.
//! - [`Resharing`] copies each missing node's fragment to `F` responsive nodes.
//! - [`Proactive`] sizes each entry's code from the previous entry's response
//!   count, re-encoding on a miss.

mod full_fallback;
mod proactive;
mod resharing;

pub use full_fallback::FullFallback;
pub use proactive::Proactive;
pub use resharing::Resharing;

use crate::codec::MessageId;
use crate::protocol::{
    Body, NodeId, Payload, ProtocolError, ProtocolMessage, ShardList, StorageNode,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BaselineKind {
    FullReplicationFallback,
    EndangeredResharing,
    ProactiveEncoding,
}

/// Sends shards `indices` of a `(k, total)` code to `node`, or stores them in
/// the leader's own store for node 0. Returns the local held count when stored.
#[allow(clippy::too_many_arguments)]
fn deliver<P: Payload>(
    payload: &mut P,
    local: &mut StorageNode<P::Shard>,
    id: MessageId,
    generation: u32,
    code: (usize, usize),
    node: usize,
    indices: impl IntoIterator<Item = usize>,
    out: &mut Vec<ProtocolMessage<P::Shard>>,
) -> Result<Option<u16>, ProtocolError> {
    let fragments: ShardList<P::Shard> = indices
        .into_iter()
        .map(|i| payload.shard(id, code.0, code.1, i))
        .collect::<Result<_, _>>()?;
    if node == NodeId::LEADER.0 {
        let (_, held) = local.on_disseminate(id, generation, fragments)?;
        Ok(Some(held))
    } else {
        out.push(ProtocolMessage {
            from: NodeId::LEADER,
            to: NodeId(node),
            body: Body::Disseminate {
                id,
                generation,
                fragments,
            },
        });
        Ok(None)
    }
}

/// Dense per-message slots shared by the baseline leaders.
#[derive(Debug)]
struct Slots<T>(Vec<Option<T>>);

impl<T> Default for Slots<T> {
    fn default() -> Self {
        Self(Vec::new())
    }
}

impl<T> Slots<T> {
    fn get(&self, id: MessageId) -> Option<&T> {
        self.0.get(id.0 as usize)?.as_ref()
    }

    fn take(&mut self, id: MessageId) -> Option<T> {
        self.0.get_mut(id.0 as usize)?.take()
    }

    fn put(&mut self, id: MessageId, value: T) {
        let i = id.0 as usize;
        if i >= self.0.len() {
            self.0.resize_with(i + 1, || None);
        }
        self.0[i] = Some(value);
    }
}
