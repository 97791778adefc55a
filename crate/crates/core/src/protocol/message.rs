use std::fmt;

use smallvec::SmallVec;

use super::{NodeId, Shard};
use crate::codec::MessageId;

/// Shards carried by one message; eAID sends at most a handful per node.
pub type ShardList<S> = SmallVec<[S; 2]>;

#[derive(Debug, Clone)]
pub enum Body<S> {
    /// Fragments for the recipient. `generation` orders re-encodings of the
    /// same message: a node holding an older generation replaces it.
    Disseminate {
        id: MessageId,
        generation: u32,
        fragments: ShardList<S>,
    },
    Ack {
        id: MessageId,
        generation: u32,
        held: u16,
    },
    AckUpdate {
        id: MessageId,
        quorum: u16,
    },
}

impl<S> Body<S> {
    pub fn id(&self) -> MessageId {
        match self {
            Body::Disseminate { id, .. } | Body::Ack { id, .. } | Body::AckUpdate { id, .. } => *id,
        }
    }

    pub fn variant(&self) -> &'static str {
        match self {
            Body::Disseminate { .. } => "Disseminate",
            Body::Ack { .. } => "Ack",
            Body::AckUpdate { .. } => "AckUpdate",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProtocolMessage<S> {
    pub from: NodeId,
    pub to: NodeId,
    pub body: Body<S>,
}

/// Canonical trace form: `from to variant id=.. <counts>`.
impl<S: Shard> fmt::Display for ProtocolMessage<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} id={}",
            self.from,
            self.to,
            self.body.variant(),
            self.body.id()
        )?;
        match &self.body {
            Body::Disseminate {
                generation,
                fragments,
                ..
            } => {
                write!(f, " gen={generation} frags=")?;
                for (i, s) in fragments.iter().enumerate() {
                    write!(f, "{}{}", if i == 0 { "" } else { "," }, s.index())?;
                }
                Ok(())
            }
            Body::Ack {
                generation, held, ..
            } => write!(f, " gen={generation} held={held}"),
            Body::AckUpdate { quorum, .. } => write!(f, " q={quorum}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::ShardTag;
    use smallvec::smallvec;

    #[test]
    fn trace_lines() {
        let m: ProtocolMessage<ShardTag> = ProtocolMessage {
            from: NodeId(0),
            to: NodeId(2),
            body: Body::Disseminate {
                id: MessageId(4),
                generation: 0,
                fragments: smallvec![
                    ShardTag { index: 6, bytes: 1 },
                    ShardTag { index: 7, bytes: 1 }
                ],
            },
        };
        assert_eq!(m.to_string(), "n0 n2 Disseminate id=4 gen=0 frags=6,7");
        let a: ProtocolMessage<ShardTag> = ProtocolMessage {
            from: NodeId(2),
            to: NodeId(0),
            body: Body::Ack {
                id: MessageId(4),
                generation: 0,
                held: 2,
            },
        };
        assert_eq!(a.to_string(), "n2 n0 Ack id=4 gen=0 held=2");
    }
}
