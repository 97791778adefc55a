//! What a storage node holds: real coded fragments, or size-only tags when a
//! run only needs byte accounting (codes wider than GF(256) allows).

use std::fmt::Debug;

use crate::codec::{shard_len, Codec, CodecError, Fragment, MessageId};

pub trait Shard: Clone + Debug {
    fn index(&self) -> u16;
    /// Payload bytes this shard occupies in storage.
    fn stored_bytes(&self) -> u64;
}

impl Shard for Fragment {
    fn index(&self) -> u16 {
        self.index
    }

    fn stored_bytes(&self) -> u64 {
        self.data.len() as u64
    }
}

/// A fragment reduced to its index and size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardTag {
    pub index: u16,
    pub bytes: u32,
}

impl Shard for ShardTag {
    fn index(&self) -> u16 {
        self.index
    }

    fn stored_bytes(&self) -> u64 {
        self.bytes as u64
    }
}

/// A message the leader can cut into shards under any `(k, n)` code.
pub trait Payload: Debug {
    type Shard: Shard;

    fn original_length(&self) -> usize;

    fn shard(
        &mut self,
        id: MessageId,
        data_shards: usize,
        total_shards: usize,
        index: usize,
    ) -> Result<Self::Shard, CodecError>;
}

/// Message bytes, encoded on first use and cached for the last code shape.
#[derive(Debug, Clone)]
pub struct EncodedMessage {
    bytes: Vec<u8>,
    cache: Option<((usize, usize), Vec<Fragment>)>,
}

impl EncodedMessage {
    pub fn new(bytes: Vec<u8>) -> Self {
        Self { bytes, cache: None }
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }
}

impl Payload for EncodedMessage {
    type Shard = Fragment;

    fn original_length(&self) -> usize {
        self.bytes.len()
    }

    fn shard(
        &mut self,
        id: MessageId,
        data_shards: usize,
        total_shards: usize,
        index: usize,
    ) -> Result<Fragment, CodecError> {
        let shape = (data_shards, total_shards);
        if self.cache.as_ref().map(|(s, _)| *s) != Some(shape) {
            let frags = Codec::with_shape(data_shards, total_shards)?.encode(id, &self.bytes)?;
            self.cache = Some((shape, frags));
        }
        let (_, frags) = self.cache.as_ref().unwrap();
        frags
            .get(index)
            .cloned()
            .ok_or_else(|| CodecError::InvalidInput(format!("fragment index {index} out of range")))
    }
}

/// A message known only by its length.
#[derive(Debug, Clone, Copy)]
pub struct SizedMessage {
    pub len: u32,
}

impl Payload for SizedMessage {
    type Shard = ShardTag;

    fn original_length(&self) -> usize {
        self.len as usize
    }

    fn shard(
        &mut self,
        _id: MessageId,
        data_shards: usize,
        total_shards: usize,
        index: usize,
    ) -> Result<ShardTag, CodecError> {
        if self.len == 0 {
            return Err(CodecError::InvalidInput(
                "cannot encode an empty message".into(),
            ));
        }
        if data_shards == 0 || index >= total_shards || total_shards > u16::MAX as usize {
            return Err(CodecError::Config(format!(
                "fragment {index} of a ({data_shards}, {total_shards}) code"
            )));
        }
        Ok(ShardTag {
            index: index as u16,
            bytes: shard_len(self.len as usize, data_shards) as u32,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_and_fragments_account_identically() {
        let mut real = EncodedMessage::new(vec![7u8; 3000]);
        let mut sized = SizedMessage { len: 3000 };
        for (k, n) in [(3, 15), (1, 5), (2, 5), (1, 1)] {
            for i in 0..n {
                let a = real.shard(MessageId(1), k, n, i).unwrap();
                let b = sized.shard(MessageId(1), k, n, i).unwrap();
                assert_eq!(a.stored_bytes(), b.stored_bytes());
                assert_eq!(a.index(), b.index());
            }
        }
    }

    #[test]
    fn tags_allow_wide_codes() {
        let mut sized = SizedMessage { len: 1000 };
        let tag = sized.shard(MessageId(0), 50, 4950, 4949).unwrap();
        assert_eq!(tag.bytes, 20);
    }
}
