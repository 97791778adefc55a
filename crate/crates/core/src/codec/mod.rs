//! Fixed-parameter MDS erasure coding for dispersal.
//!
//! A message of `B` bytes is encoded with a systematic `(F+1, (F+1)(N-1))`
//! Reed-Solomon code into `(F+1)·N` fragments of `⌈B/(F+1)⌉` bytes each. Any
//! `F+1` distinct fragments reconstruct the message. Node `j` owns the
//! contiguous index block `[j·(F+1), (j+1)·(F+1))`.

mod gf256;
mod rs;

use std::fmt;
use std::ops::Range;

use thiserror::Error;

pub use rs::{ReedSolomon, MAX_TOTAL_SHARDS};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid coding parameters: {0}")]
    Config(String),
    #[error("code with {total_shards} shards does not fit in GF(256)")]
    FieldTooSmall { total_shards: usize },
    #[error("insufficient fragments: have {have} distinct, need {need}")]
    InsufficientFragments { have: usize, need: usize },
    #[error("corrupt fragment set: {0}")]
    Corruption(String),
}

/// Identifier of a dispersed message (a log index in the KV variant).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct MessageId(pub u64);

impl fmt::Display for MessageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Cluster-derived code shape: `N = 2F+1`, `k = F+1`, `k·N` total shards.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CodingParams {
    n_nodes: usize,
    max_faults: usize,
}

impl CodingParams {
    pub fn new(n_nodes: usize, max_faults: usize) -> Result<Self, CodecError> {
        if max_faults == 0 {
            return Err(CodecError::Config("max_faults must be positive".into()));
        }
        if n_nodes != 2 * max_faults + 1 {
            return Err(CodecError::Config(format!(
                "n_nodes must equal 2·max_faults+1 (got N={n_nodes}, F={max_faults})"
            )));
        }
        if (max_faults + 1) * n_nodes > u16::MAX as usize {
            return Err(CodecError::Config(format!(
                "{} total shards overflow a 16-bit fragment index",
                (max_faults + 1) * n_nodes
            )));
        }
        Ok(Self {
            n_nodes,
            max_faults,
        })
    }

    pub fn for_faults(max_faults: usize) -> Result<Self, CodecError> {
        Self::new(2 * max_faults + 1, max_faults)
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn max_faults(&self) -> usize {
        self.max_faults
    }

    pub fn data_shards(&self) -> usize {
        self.max_faults + 1
    }

    pub fn total_shards(&self) -> usize {
        self.data_shards() * self.n_nodes
    }

    pub fn shard_len(&self, original_length: usize) -> usize {
        shard_len(original_length, self.data_shards())
    }
}

/// Bytes per fragment for a message of `original_length` under a `k`-of-n code.
pub fn shard_len(original_length: usize, data_shards: usize) -> usize {
    original_length.div_ceil(data_shards)
}

/// One erasure-coded piece of a message.
#[derive(Clone, PartialEq, Eq)]
pub struct Fragment {
    pub message_id: MessageId,
    pub index: u16,
    pub original_length: u32,
    pub data: Vec<u8>,
}

impl fmt::Debug for Fragment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Fragment")
            .field("message_id", &self.message_id)
            .field("index", &self.index)
            .field("original_length", &self.original_length)
            .field("len", &self.data.len())
            .finish()
    }
}

/// Wire header: message id (u64), index (u16), original length (u32), big-endian.
pub const FRAGMENT_HEADER_LEN: usize = 8 + 2 + 4;

impl Fragment {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FRAGMENT_HEADER_LEN + self.data.len());
        out.extend_from_slice(&self.message_id.0.to_be_bytes());
        out.extend_from_slice(&self.index.to_be_bytes());
        out.extend_from_slice(&self.original_length.to_be_bytes());
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        if bytes.len() < FRAGMENT_HEADER_LEN {
            return Err(CodecError::Corruption(format!(
                "fragment of {} bytes is shorter than its header",
                bytes.len()
            )));
        }
        let (id, rest) = bytes.split_at(8);
        let (index, rest) = rest.split_at(2);
        let (len, data) = rest.split_at(4);
        Ok(Self {
            message_id: MessageId(u64::from_be_bytes(id.try_into().unwrap())),
            index: u16::from_be_bytes(index.try_into().unwrap()),
            original_length: u32::from_be_bytes(len.try_into().unwrap()),
            data: data.to_vec(),
        })
    }
}

/// A Reed-Solomon code bound to a shape, reusable across messages.
#[derive(Debug, Clone)]
pub struct Codec {
    rs: ReedSolomon,
}

impl Codec {
    pub fn new(params: &CodingParams) -> Result<Self, CodecError> {
        Self::with_shape(params.data_shards(), params.total_shards())
    }

    /// Any `(k, n)` shape; the baselines use codes other than the dispersal one.
    pub fn with_shape(data_shards: usize, total_shards: usize) -> Result<Self, CodecError> {
        Ok(Self {
            rs: ReedSolomon::new(data_shards, total_shards)?,
        })
    }

    pub fn data_shards(&self) -> usize {
        self.rs.data_shards()
    }

    pub fn total_shards(&self) -> usize {
        self.rs.total_shards()
    }

    pub fn encode(&self, id: MessageId, message: &[u8]) -> Result<Vec<Fragment>, CodecError> {
        if message.is_empty() {
            return Err(CodecError::InvalidInput(
                "cannot encode an empty message".into(),
            ));
        }
        let original_length = u32::try_from(message.len()).map_err(|_| {
            CodecError::InvalidInput(format!("message of {} bytes is too large", message.len()))
        })?;
        let k = self.rs.data_shards();
        let len = shard_len(message.len(), k);
        let mut padded = message.to_vec();
        padded.resize(len * k, 0);
        let blocks: Vec<&[u8]> = padded.chunks(len).collect();
        Ok(self
            .rs
            .encode_blocks(&blocks)
            .into_iter()
            .enumerate()
            .map(|(index, data)| Fragment {
                message_id: id,
                index: index as u16,
                original_length,
                data,
            })
            .collect())
    }

    pub fn decode(&self, fragments: &[Fragment]) -> Result<Vec<u8>, CodecError> {
        let k = self.rs.data_shards();
        let first = fragments
            .first()
            .ok_or(CodecError::InsufficientFragments { have: 0, need: k })?;
        let expected_len = shard_len(first.original_length as usize, k);
        let mut chosen: Vec<&Fragment> = Vec::with_capacity(k);
        let mut seen = vec![false; self.rs.total_shards()];
        for frag in fragments {
            if frag.message_id != first.message_id {
                return Err(CodecError::Corruption(format!(
                    "mixed message ids {} and {}",
                    first.message_id, frag.message_id
                )));
            }
            if frag.original_length != first.original_length || frag.data.len() != expected_len {
                return Err(CodecError::Corruption(format!(
                    "fragment {} has inconsistent length",
                    frag.index
                )));
            }
            let idx = frag.index as usize;
            if idx >= seen.len() {
                return Err(CodecError::Corruption(format!(
                    "fragment index {idx} outside code of {} shards",
                    seen.len()
                )));
            }
            if !seen[idx] {
                seen[idx] = true;
                chosen.push(frag);
            }
        }
        if chosen.len() < k {
            return Err(CodecError::InsufficientFragments {
                have: chosen.len(),
                need: k,
            });
        }
        // Prefer systematic shards: they decode without a matrix inversion.
        chosen.sort_by_key(|f| f.index);
        chosen.truncate(k);
        let shards: Vec<(usize, &[u8])> = chosen
            .iter()
            .map(|f| (f.index as usize, f.data.as_slice()))
            .collect();
        let mut message: Vec<u8> = self.rs.decode_blocks(&shards)?.concat();
        message.truncate(first.original_length as usize);
        Ok(message)
    }
}

pub fn encode(
    id: MessageId,
    message: &[u8],
    params: &CodingParams,
) -> Result<Vec<Fragment>, CodecError> {
    Codec::new(params)?.encode(id, message)
}

pub fn decode(fragments: &[Fragment], params: &CodingParams) -> Result<Vec<u8>, CodecError> {
    Codec::new(params)?.decode(fragments)
}

/// Disjoint per-node fragment blocks `S_0..S_{N-1}`, each of `F+1` indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FragmentAssignment {
    blocks: Vec<Range<usize>>,
}

impl FragmentAssignment {
    pub fn blocks(&self) -> &[Range<usize>] {
        &self.blocks
    }

    pub fn block(&self, node: usize) -> Range<usize> {
        self.blocks[node].clone()
    }

    /// Node owning fragment `index`.
    pub fn owner(&self, index: usize) -> Option<usize> {
        let width = self.blocks.first()?.len();
        let node = index / width;
        (node < self.blocks.len()).then_some(node)
    }
}

pub fn partition(params: &CodingParams) -> FragmentAssignment {
    let k = params.data_shards();
    FragmentAssignment {
        blocks: (0..params.n_nodes()).map(|j| j * k..(j + 1) * k).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(len: usize) -> Vec<u8> {
        (0..len).map(|i| (i * 31 + 7) as u8).collect()
    }

    #[test]
    fn three_hundred_bytes_at_five_nodes() {
        let params = CodingParams::new(5, 2).unwrap();
        let frags = encode(MessageId(1), &sample(300), &params).unwrap();
        assert_eq!(frags.len(), 15);
        assert!(frags.iter().all(|f| f.data.len() == 100));
    }

    #[test]
    fn systematic_prefix_is_plaintext() {
        let params = CodingParams::new(3, 1).unwrap();
        let msg = b"hello world!";
        let frags = encode(MessageId(9), msg, &params).unwrap();
        assert_eq!(frags[0].data, msg[..6]);
        assert_eq!(frags[1].data, msg[6..]);
    }

    #[test]
    fn any_two_of_six_decode_identically() {
        let params = CodingParams::new(3, 1).unwrap();
        let msg = sample(77);
        let frags = encode(MessageId(2), &msg, &params).unwrap();
        let low = decode(&frags[0..2], &params).unwrap();
        let high = decode(&frags[4..6], &params).unwrap();
        assert_eq!(low, msg);
        assert_eq!(low, high);
    }

    #[test]
    fn padding_is_stripped() {
        let params = CodingParams::new(7, 3).unwrap();
        for len in [1, 3, 4, 5, 333] {
            let msg = sample(len);
            let frags = encode(MessageId(0), &msg, &params).unwrap();
            assert_eq!(frags[0].data.len(), len.div_ceil(4));
            assert_eq!(decode(&frags[20..24], &params).unwrap(), msg);
        }
    }

    #[test]
    fn too_few_fragments() {
        let params = CodingParams::new(5, 2).unwrap();
        let frags = encode(MessageId(3), &sample(30), &params).unwrap();
        assert_eq!(
            decode(&frags[..2], &params),
            Err(CodecError::InsufficientFragments { have: 2, need: 3 })
        );
        // Duplicates do not count twice.
        let dup = vec![frags[4].clone(), frags[4].clone(), frags[9].clone()];
        assert!(matches!(
            decode(&dup, &params),
            Err(CodecError::InsufficientFragments { have: 2, .. })
        ));
        assert!(matches!(
            decode(&[], &params),
            Err(CodecError::InsufficientFragments { have: 0, .. })
        ));
    }

    #[test]
    fn mixed_ids_and_lengths_are_corruption() {
        let params = CodingParams::new(3, 1).unwrap();
        let a = encode(MessageId(1), &sample(10), &params).unwrap();
        let b = encode(MessageId(2), &sample(10), &params).unwrap();
        assert!(matches!(
            decode(&[a[0].clone(), b[1].clone()], &params),
            Err(CodecError::Corruption(_))
        ));
        let c = encode(MessageId(1), &sample(12), &params).unwrap();
        assert!(matches!(
            decode(&[a[0].clone(), c[1].clone()], &params),
            Err(CodecError::Corruption(_))
        ));
    }

    #[test]
    fn empty_message_and_bad_params_rejected() {
        let params = CodingParams::new(3, 1).unwrap();
        assert!(matches!(
            encode(MessageId(0), &[], &params),
            Err(CodecError::InvalidInput(_))
        ));
        assert!(matches!(
            CodingParams::new(4, 1),
            Err(CodecError::Config(_))
        ));
        assert!(matches!(
            CodingParams::new(1, 0),
            Err(CodecError::Config(_))
        ));
        // 99 nodes is a valid cluster shape but too wide for byte-level coding.
        let wide = CodingParams::new(99, 49).unwrap();
        assert_eq!(wide.total_shards(), 4950);
        assert!(matches!(
            Codec::new(&wide),
            Err(CodecError::FieldTooSmall { total_shards: 4950 })
        ));
    }

    #[test]
    fn wire_form_header_layout() {
        let frag = Fragment {
            message_id: MessageId(0x0102030405060708),
            index: 0x0A0B,
            original_length: 0x0C0D0E0F,
            data: vec![0xEE, 0xFF],
        };
        let bytes = frag.to_bytes();
        assert_eq!(
            bytes,
            [1, 2, 3, 4, 5, 6, 7, 8, 0x0A, 0x0B, 0x0C, 0x0D, 0x0E, 0x0F, 0xEE, 0xFF]
        );
        assert_eq!(Fragment::from_bytes(&bytes).unwrap(), frag);
        assert!(Fragment::from_bytes(&bytes[..5]).is_err());
    }

    #[test]
    fn contiguous_partition() {
        let params = CodingParams::new(5, 2).unwrap();
        let assignment = partition(&params);
        let blocks: Vec<_> = assignment.blocks().to_vec();
        assert_eq!(blocks, vec![0..3, 3..6, 6..9, 9..12, 12..15]);
        assert_eq!(assignment.owner(13), Some(4));
        assert_eq!(assignment.owner(15), None);
    }

    #[test]
    fn partition_disjoint_and_covering_up_to_99_nodes() {
        for f in 1..=49 {
            let params = CodingParams::for_faults(f).unwrap();
            let assignment = partition(&params);
            let mut owner = vec![None; params.total_shards()];
            for (node, block) in assignment.blocks().iter().enumerate() {
                assert_eq!(block.len(), f + 1);
                for idx in block.clone() {
                    assert!(owner[idx].is_none(), "index {idx} assigned twice");
                    owner[idx] = Some(node);
                }
            }
            assert!(owner.iter().all(Option::is_some));
        }
    }
}
