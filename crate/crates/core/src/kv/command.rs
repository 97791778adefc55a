//! Client commands and the in-memory key-value state machine.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::{KvError, LogIndex};

const TAG_PUT: u8 = 0;
const TAG_GET: u8 = 1;
const TAG_NOOP: u8 = 2;

/// A replicated command. Serialized as a tag byte followed by
/// length-prefixed (u32, big-endian) key and value fields.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KvCommand {
    Put {
        key: Vec<u8>,
        value: Vec<u8>,
    },
    Get {
        key: Vec<u8>,
    },
    /// Appended by a new leader to commit entries of earlier terms.
    Noop,
}

impl KvCommand {
    pub fn put(key: impl Into<Vec<u8>>, value: impl Into<Vec<u8>>) -> Self {
        KvCommand::Put {
            key: key.into(),
            value: value.into(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            KvCommand::Put { key, value } => {
                out.push(TAG_PUT);
                push_field(&mut out, key);
                push_field(&mut out, value);
            }
            KvCommand::Get { key } => {
                out.push(TAG_GET);
                push_field(&mut out, key);
            }
            KvCommand::Noop => out.push(TAG_NOOP),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, KvError> {
        let (&tag, mut rest) = bytes
            .split_first()
            .ok_or_else(|| KvError::Malformed("empty command".into()))?;
        let cmd = match tag {
            TAG_PUT => {
                let key = take_field(&mut rest)?;
                let value = take_field(&mut rest)?;
                KvCommand::Put { key, value }
            }
            TAG_GET => KvCommand::Get {
                key: take_field(&mut rest)?,
            },
            TAG_NOOP => KvCommand::Noop,
            other => return Err(KvError::Malformed(format!("unknown command tag {other}"))),
        };
        if !rest.is_empty() {
            return Err(KvError::Malformed(format!(
                "{} trailing bytes after command",
                rest.len()
            )));
        }
        Ok(cmd)
    }
}

/// Bytes a `Put` adds on top of its key and value.
pub const PUT_OVERHEAD: usize = 1 + 4 + 4;

fn push_field(out: &mut Vec<u8>, field: &[u8]) {
    out.extend_from_slice(&(field.len() as u32).to_be_bytes());
    out.extend_from_slice(field);
}

fn take_field(rest: &mut &[u8]) -> Result<Vec<u8>, KvError> {
    if rest.len() < 4 {
        return Err(KvError::Malformed("truncated length prefix".into()));
    }
    let (len, tail) = rest.split_at(4);
    let len = u32::from_be_bytes(len.try_into().unwrap()) as usize;
    if tail.len() < len {
        return Err(KvError::Malformed(format!(
            "field of {len} bytes exceeds the remaining {}",
            tail.len()
        )));
    }
    let (field, tail) = tail.split_at(len);
    *rest = tail;
    Ok(field.to_vec())
}

/// The applied key-value map of one node.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvStore {
    map: BTreeMap<Vec<u8>, Vec<u8>>,
    last_applied: LogIndex,
}

impl KvStore {
    /// Applies the command at `index`, which must directly follow the last one.
    pub fn apply(&mut self, index: LogIndex, cmd: &KvCommand) {
        assert_eq!(
            index.0,
            self.last_applied.0 + 1,
            "commands are applied in log order"
        );
        if let KvCommand::Put { key, value } = cmd {
            self.map.insert(key.clone(), value.clone());
        }
        self.last_applied = index;
    }

    pub fn get(&self, key: &[u8]) -> Option<&[u8]> {
        self.map.get(key).map(Vec::as_slice)
    }

    pub fn last_applied(&self) -> LogIndex {
        self.last_applied
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Sorted `key=value` lines with non-printable bytes escaped.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            let _ = writeln!(out, "{}={}", k.escape_ascii(), v.escape_ascii());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn commands_round_trip() {
        for cmd in [
            KvCommand::put("k", "v"),
            KvCommand::put(Vec::new(), vec![0u8; 300]),
            KvCommand::Get { key: b"k".to_vec() },
            KvCommand::Noop,
        ] {
            assert_eq!(KvCommand::from_bytes(&cmd.to_bytes()).unwrap(), cmd);
        }
        assert_eq!(
            KvCommand::put("ab", "cde").to_bytes().len(),
            PUT_OVERHEAD + 5
        );
    }

    #[test]
    fn malformed_commands_are_rejected() {
        assert!(KvCommand::from_bytes(&[]).is_err());
        assert!(KvCommand::from_bytes(&[9]).is_err());
        assert!(KvCommand::from_bytes(&[TAG_GET, 0, 0, 0, 5, 1]).is_err());
        let mut long = KvCommand::Noop.to_bytes();
        long.push(0);
        assert!(KvCommand::from_bytes(&long).is_err());
    }

    #[test]
    fn put_then_get() {
        let mut s = KvStore::default();
        assert_eq!(s.get(b"k"), None);
        s.apply(LogIndex(1), &KvCommand::put("k", "v1"));
        s.apply(LogIndex(2), &KvCommand::Get { key: b"k".to_vec() });
        s.apply(LogIndex(3), &KvCommand::put("k", "v2"));
        assert_eq!(s.get(b"k"), Some(&b"v2"[..]));
        assert_eq!(s.last_applied(), LogIndex(3));
        assert_eq!(s.dump(), "k=v2\n");
    }

    #[test]
    #[should_panic(expected = "log order")]
    fn out_of_order_apply_panics() {
        KvStore::default().apply(LogIndex(2), &KvCommand::Noop);
    }
}
