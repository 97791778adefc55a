//! One replicated-log node: fragment storage and tier pruning as a follower,
//! tiered adaptive dissemination while it leads.

use std::collections::BTreeSet;
use std::fmt;

use smallvec::SmallVec;

use super::command::{KvCommand, KvStore};
use super::tier::{three_quarters, Tier};
use super::{KvError, KvParams, LogIndex, Term};
use crate::codec::{Fragment, MessageId};
use crate::protocol::NodeId;

/// Most entries one catch-up message carries.
pub const CATCH_UP_BATCH: u64 = 64;

/// A `(term, index)` position the leader vouches for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Threshold {
    pub index: LogIndex,
    pub term: Term,
}

/// A fragment tagged with the term of the entry it encodes; the index tag
/// is the fragment's message id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedFragment {
    pub term: Term,
    pub fragment: Fragment,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireEntry {
    pub term: Term,
    pub index: LogIndex,
    pub fragments: Vec<TaggedFragment>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppendEntries {
    pub term: Term,
    pub leader: NodeId,
    pub prev_index: LogIndex,
    pub prev_term: Term,
    pub entries: Vec<WireEntry>,
    pub leader_commit: LogIndex,
    pub t1: Option<Threshold>,
    pub t2: Option<Threshold>,
}

/// One reply per carried entry, or a single reply to an empty or rejected
/// request. `held` counts fragments before pruning and is absent for
/// heartbeats and rejections.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AppendResponse {
    pub term: Term,
    pub success: bool,
    pub index: LogIndex,
    pub held: Option<u16>,
    pub last_index: LogIndex,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KvBody {
    Append(AppendEntries),
    Response(AppendResponse),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KvMessage {
    pub from: NodeId,
    pub to: NodeId,
    pub body: KvBody,
}

fn fmt_threshold(t: Option<Threshold>) -> String {
    t.map_or("-".into(), |t| format!("{}/{}", t.index, t.term))
}

impl fmt::Display for KvMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} ", self.from, self.to)?;
        match &self.body {
            KvBody::Append(a) => {
                write!(
                    f,
                    "AppendEntries term={} prev={}/{} entries=",
                    a.term, a.prev_index, a.prev_term
                )?;
                if a.entries.is_empty() {
                    f.write_str("-")?;
                }
                for (n, e) in a.entries.iter().enumerate() {
                    let sep = if n == 0 { "" } else { "," };
                    write!(f, "{sep}{}[{}]", e.index, e.fragments.len())?;
                }
                write!(
                    f,
                    " commit={} T1={} T2={}",
                    a.leader_commit,
                    fmt_threshold(a.t1),
                    fmt_threshold(a.t2)
                )
            }
            KvBody::Response(r) => {
                write!(
                    f,
                    "AppendResponse term={} {} index={} held=",
                    r.term,
                    if r.success { "ok" } else { "reject" },
                    r.index
                )?;
                match r.held {
                    Some(h) => write!(f, "{h}")?,
                    None => f.write_str("-")?,
                }
                write!(f, " last={}", r.last_index)
            }
        }
    }
}

/// A log position holding fragments of one `(term, index)` entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogSlot {
    pub term: Term,
    pub index: LogIndex,
    fragments: SmallVec<[Fragment; 2]>,
    pub applied: bool,
}

impl LogSlot {
    fn new(term: Term, index: LogIndex) -> Self {
        Self {
            term,
            index,
            fragments: SmallVec::new(),
            applied: false,
        }
    }

    /// Held fragments, ascending by fragment index.
    pub fn fragments(&self) -> &[Fragment] {
        &self.fragments
    }

    pub fn stored_bytes(&self) -> u64 {
        self.fragments.iter().map(|f| f.data.len() as u64).sum()
    }

    /// Adds fragments not yet held; returns the bytes added.
    fn union(&mut self, fragments: impl IntoIterator<Item = Fragment>) -> u64 {
        let mut added = 0;
        for frag in fragments {
            if let Err(pos) = self
                .fragments
                .binary_search_by_key(&frag.index, |f| f.index)
            {
                added += frag.data.len() as u64;
                self.fragments.insert(pos, frag);
            }
        }
        added
    }

    /// Keeps the `keep` lowest-indexed fragments; returns (count, bytes) dropped.
    fn retain(&mut self, keep: usize) -> (usize, u64) {
        if self.fragments.len() <= keep {
            return (0, 0);
        }
        let dropped: u64 = self.fragments[keep..]
            .iter()
            .map(|f| f.data.len() as u64)
            .sum();
        let count = self.fragments.len() - keep;
        self.fragments.truncate(keep);
        (count, dropped)
    }
}

/// Leader-side bookkeeping for one entry's dissemination.
#[derive(Debug, Clone)]
struct Tracked {
    sent: Vec<u16>,
    held: Vec<u16>,
    acked: Vec<bool>,
    ack_count: usize,
    tier: Tier,
    /// Set once `|A| ≥ w`; the tier, and with it `f_per`, is frozen from then on.
    frozen: bool,
    timeouts: u32,
    /// Full encoding, dropped once every node holds its share of a committed entry.
    encoding: Option<Vec<Fragment>>,
}

/// Volatile state of the current leader.
#[derive(Debug, Clone)]
pub struct LeaderState {
    resp_est: usize,
    next_index: Vec<u64>,
    match_index: Vec<u64>,
    /// Last index of an outstanding catch-up message per follower.
    catch_up: Vec<Option<u64>>,
    tracked: Vec<Tracked>,
    plaintext: Vec<Vec<u8>>,
    t1: u64,
    t2: u64,
    latest: u64,
}

impl LeaderState {
    pub fn resp_est(&self) -> usize {
        self.resp_est
    }

    pub fn t1(&self) -> LogIndex {
        LogIndex(self.t1)
    }

    pub fn t2(&self) -> LogIndex {
        LogIndex(self.t2)
    }

    pub fn next_index(&self, node: NodeId) -> LogIndex {
        LogIndex(self.next_index[node.0])
    }

    pub fn match_index(&self, node: NodeId) -> LogIndex {
        LogIndex(self.match_index[node.0])
    }

    /// `(w, f_per)` of entry `index` (frozen once dispersed).
    pub fn tier(&self, index: LogIndex) -> Option<Tier> {
        self.entry(index).map(|t| t.tier)
    }

    pub fn ack_count(&self, index: LogIndex) -> Option<usize> {
        self.entry(index).map(|t| t.ack_count)
    }

    pub fn is_dispersed(&self, index: LogIndex) -> bool {
        self.entry(index).is_some_and(|t| t.frozen)
    }

    pub fn timeouts(&self, index: LogIndex) -> Option<u32> {
        self.entry(index).map(|t| t.timeouts)
    }

    /// The leader's plaintext of entry `index`.
    pub fn content(&self, index: LogIndex) -> Option<&[u8]> {
        index
            .0
            .checked_sub(1)
            .and_then(|i| self.plaintext.get(i as usize))
            .map(Vec::as_slice)
    }

    fn entry(&self, index: LogIndex) -> Option<&Tracked> {
        index
            .0
            .checked_sub(1)
            .and_then(|i| self.tracked.get(i as usize))
    }
}

/// Effects of one step, applied by the caller.
#[derive(Debug, Default)]
pub struct Output {
    pub messages: Vec<KvMessage>,
    /// Dissemination timers to arm.
    pub arm: Vec<LogIndex>,
    /// Dissemination waits that finished, with their timeout rounds.
    pub dispersed: Vec<(LogIndex, u32)>,
    /// Entries newly committed and applied at the leader.
    pub committed: Vec<LogIndex>,
}

#[derive(Debug, Clone)]
pub struct RaftNode {
    id: NodeId,
    params: KvParams,
    current_term: Term,
    log: Vec<LogSlot>,
    commit_index: LogIndex,
    my_t1: Option<Threshold>,
    my_t2: Option<Threshold>,
    /// Entries up to these indices are already pruned to 2 and 1 fragments.
    pruned_two: u64,
    pruned_one: u64,
    /// Slots that gained fragments since the last prune.
    touched: BTreeSet<u64>,
    store: KvStore,
    leader: Option<LeaderState>,
    total_bytes: u64,
    /// Indices whose fragments were discarded, kept only while auditing.
    discarded: Option<BTreeSet<u64>>,
}

impl RaftNode {
    pub fn new(id: NodeId, params: KvParams) -> Self {
        Self {
            id,
            params,
            current_term: Term(0),
            log: Vec::new(),
            commit_index: LogIndex(0),
            my_t1: None,
            my_t2: None,
            pruned_two: 0,
            pruned_one: 0,
            touched: BTreeSet::new(),
            store: KvStore::default(),
            leader: None,
            total_bytes: 0,
            discarded: None,
        }
    }

    /// Starts recording which entries lose fragments.
    pub fn audit_discards(&mut self) {
        self.discarded.get_or_insert_with(BTreeSet::new);
    }

    /// Entries that lost fragments since the last call.
    pub fn take_discards(&mut self) -> Vec<LogIndex> {
        self.discarded
            .as_mut()
            .map(|d| std::mem::take(d).into_iter().map(LogIndex).collect())
            .unwrap_or_default()
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn current_term(&self) -> Term {
        self.current_term
    }

    pub fn commit_index(&self) -> LogIndex {
        self.commit_index
    }

    pub fn last_index(&self) -> LogIndex {
        LogIndex(self.log.len() as u64)
    }

    pub fn last_term(&self) -> Term {
        self.log.last().map_or(Term(0), |s| s.term)
    }

    pub fn log(&self) -> &[LogSlot] {
        &self.log
    }

    pub fn slot(&self, index: LogIndex) -> Option<&LogSlot> {
        index
            .0
            .checked_sub(1)
            .and_then(|i| self.log.get(i as usize))
    }

    pub fn term_at(&self, index: LogIndex) -> Option<Term> {
        if index.0 == 0 {
            return Some(Term(0));
        }
        self.slot(index).map(|s| s.term)
    }

    pub fn thresholds(&self) -> (Option<Threshold>, Option<Threshold>) {
        (self.my_t1, self.my_t2)
    }

    pub fn store(&self) -> &KvStore {
        &self.store
    }

    pub fn leader_state(&self) -> Option<&LeaderState> {
        self.leader.as_ref()
    }

    pub fn is_leader(&self) -> bool {
        self.leader.is_some()
    }

    /// Fragment bytes held across the whole log.
    pub fn total_bytes(&self) -> u64 {
        self.total_bytes
    }

    /// Enters a later term as a follower.
    pub fn observe_term(&mut self, term: Term) {
        if term > self.current_term {
            self.current_term = term;
            self.leader = None;
        }
    }

    /// Loses volatile state. The log, term and thresholds persist.
    pub fn crash(&mut self) {
        self.leader = None;
        self.store = KvStore::default();
        for s in &mut self.log {
            s.applied = false;
        }
    }

    /// Leader-local read against applied state.
    pub fn leader_get(&self, key: &[u8]) -> Result<Option<Vec<u8>>, KvError> {
        if self.leader.is_none() {
            return Err(KvError::NotLeader(self.id));
        }
        Ok(self.store.get(key).map(<[u8]>::to_vec))
    }

    /// Drops entries from `from` onward. Fails if that would remove a
    /// committed entry.
    pub fn truncate_from(&mut self, from: LogIndex) -> Result<(), KvError> {
        if from <= self.commit_index {
            return Err(KvError::CommittedTruncation {
                node: self.id,
                index: from,
                commit: self.commit_index,
            });
        }
        let keep = from.0.saturating_sub(1) as usize;
        if keep >= self.log.len() {
            return Ok(());
        }
        let dropped: u64 = self.log[keep..].iter().map(LogSlot::stored_bytes).sum();
        self.total_bytes -= dropped;
        self.log.truncate(keep);
        let floor = keep as u64;
        self.pruned_two = self.pruned_two.min(floor);
        self.pruned_one = self.pruned_one.min(floor);
        self.touched.retain(|&i| i <= floor);
        Ok(())
    }

    /// Applies committed entries from their reconstructed contents, which
    /// must cover `last_applied+1 ..= commit_index`.
    pub fn apply_committed(&mut self, contents: &[Vec<u8>]) -> Result<(), KvError> {
        let from = self.store.last_applied().0 + 1;
        for i in from..=self.commit_index.0 {
            let bytes = contents.get(i as usize - 1).ok_or(KvError::Unavailable {
                index: LogIndex(i),
                have: 0,
                need: self.params.max_faults() + 1,
            })?;
            let cmd = KvCommand::from_bytes(bytes)?;
            self.store.apply(LogIndex(i), &cmd);
            self.log[i as usize - 1].applied = true;
        }
        Ok(())
    }

    // ----- follower side -----

    fn reply(&self, to: NodeId, success: bool, index: LogIndex, held: Option<u16>) -> KvMessage {
        KvMessage {
            from: self.id,
            to,
            body: KvBody::Response(AppendResponse {
                term: self.current_term,
                success,
                index,
                held,
                last_index: self.last_index(),
            }),
        }
    }

    pub fn on_append_entries(&mut self, rpc: AppendEntries) -> Vec<KvMessage> {
        let leader = rpc.leader;
        if rpc.term < self.current_term {
            return vec![self.reply(leader, false, rpc.prev_index, None)];
        }
        self.observe_term(rpc.term);
        if self.term_at(rpc.prev_index) != Some(rpc.prev_term) {
            let mut r = self.reply(leader, false, rpc.prev_index, None);
            if let KvBody::Response(resp) = &mut r.body {
                resp.last_index = self.mismatch_hint(rpc.prev_index);
            }
            return vec![r];
        }
        let mut held = Vec::with_capacity(rpc.entries.len());
        let last_new = LogIndex(rpc.prev_index.0 + rpc.entries.len() as u64);
        for e in rpc.entries {
            if self.term_at(e.index).is_some_and(|t| t != e.term) {
                // Entries past a matched prefix are never committed here.
                if self.truncate_from(e.index).is_err() {
                    return vec![self.reply(leader, false, rpc.prev_index, None)];
                }
            }
            let tagged_ok = e
                .fragments
                .iter()
                .all(|f| f.term == e.term && f.fragment.message_id == MessageId(e.index.0));
            if !tagged_ok || e.index.0 > self.log.len() as u64 + 1 {
                return vec![self.reply(leader, false, rpc.prev_index, None)];
            }
            if e.index.0 == self.log.len() as u64 + 1 {
                self.log.push(LogSlot::new(e.term, e.index));
            }
            let slot = &mut self.log[e.index.0 as usize - 1];
            let added = slot.union(e.fragments.into_iter().map(|t| t.fragment));
            held.push((e.index, slot.fragments.len() as u16));
            self.total_bytes += added;
            if added > 0 {
                self.touched.insert(e.index.0);
            }
        }
        if rpc.leader_commit > self.commit_index {
            self.commit_index = self.commit_index.max(rpc.leader_commit.min(last_new));
        }
        self.merge_thresholds(rpc.t1, rpc.t2);
        if self.params.eager_prune {
            self.prune();
        }
        if held.is_empty() {
            return vec![self.reply(leader, true, rpc.prev_index, None)];
        }
        held.into_iter()
            .map(|(index, h)| self.reply(leader, true, index, Some(h)))
            .collect()
    }

    /// Where the leader should resume after a rejected `prev_index`: below
    /// the whole conflicting term, or at the end of a short log.
    fn mismatch_hint(&self, prev: LogIndex) -> LogIndex {
        match self.term_at(prev) {
            None => self.last_index(),
            Some(conflict) => {
                let mut i = prev.0;
                while i > 1 && self.log[i as usize - 2].term == conflict {
                    i -= 1;
                }
                LogIndex(i - 1)
            }
        }
    }

    fn merge_thresholds(&mut self, t1: Option<Threshold>, t2: Option<Threshold>) {
        self.my_t1 = self.my_t1.max(t1);
        self.my_t2 = self.my_t2.max(t2);
    }

    /// Index up to which `t` applies, or 0 if the local log does not hold
    /// the entry it names.
    fn covered(&self, t: Option<Threshold>) -> u64 {
        match t {
            Some(t) if self.term_at(t.index) == Some(t.term) => t.index.0,
            _ => 0,
        }
    }

    /// Fragments entry `index` keeps under the known thresholds.
    pub fn retention(&self, index: LogIndex) -> usize {
        if index.0 <= self.covered(self.my_t2) {
            1
        } else if index.0 <= self.covered(self.my_t1) {
            2
        } else {
            self.params.max_faults() + 1
        }
    }

    /// Discards fragments above each entry's tier retention, highest index
    /// first. Returns the number discarded.
    pub fn prune(&mut self) -> usize {
        let one = self.covered(self.my_t2);
        let two = self.covered(self.my_t1);
        let mut indices: BTreeSet<u64> = std::mem::take(&mut self.touched);
        indices.extend(self.pruned_one + 1..=one);
        indices.extend(self.pruned_two + 1..=two);
        let mut discarded = 0;
        for i in indices {
            if i == 0 || i > self.log.len() as u64 {
                continue;
            }
            let keep = self.retention(LogIndex(i));
            let (count, bytes) = self.log[i as usize - 1].retain(keep);
            discarded += count;
            self.total_bytes -= bytes;
            if count > 0 {
                if let Some(d) = &mut self.discarded {
                    d.insert(i);
                }
            }
        }
        self.pruned_one = self.pruned_one.max(one);
        self.pruned_two = self.pruned_two.max(two);
        discarded
    }

    // ----- leader side -----

    /// Takes over as leader for `term` with the reconstructed contents of
    /// every entry in the log. Applies the committed prefix, re-disseminates
    /// the log, and appends a no-op for the new term.
    pub fn become_leader(&mut self, term: Term, contents: Vec<Vec<u8>>) -> Result<Output, KvError> {
        assert_eq!(contents.len(), self.log.len(), "one content per log entry");
        assert!(term > self.current_term, "leadership needs a fresh term");
        self.current_term = term;
        self.apply_committed(&contents)?;
        let n = self.params.n_nodes();
        self.leader = Some(LeaderState {
            resp_est: n,
            next_index: vec![1; n],
            match_index: vec![0; n],
            catch_up: vec![None; n],
            tracked: Vec::new(),
            plaintext: contents,
            t1: 0,
            t2: 0,
            latest: 0,
        });
        let mut out = Output::default();
        for i in 1..=self.log.len() as u64 {
            self.disperse(LogIndex(i), &mut out)?;
        }
        self.append(KvCommand::Noop, &mut out)?;
        Ok(out)
    }

    /// Appends a client command at the end of the log and starts
    /// disseminating it.
    pub fn append(&mut self, cmd: KvCommand, out: &mut Output) -> Result<LogIndex, KvError> {
        let term = self.current_term;
        let l = self.leader.as_mut().ok_or(KvError::NotLeader(self.id))?;
        let index = LogIndex(self.log.len() as u64 + 1);
        l.plaintext.push(cmd.to_bytes());
        self.log.push(LogSlot::new(term, index));
        self.disperse(index, out)?;
        Ok(index)
    }

    fn block_slice(
        &self,
        enc: &[Fragment],
        node: NodeId,
        range: std::ops::Range<usize>,
    ) -> Vec<Fragment> {
        let base = node.0 * (self.params.max_faults() + 1);
        enc[base + range.start..base + range.end].to_vec()
    }

    fn encoding(&mut self, index: LogIndex) -> Result<Vec<Fragment>, KvError> {
        let l = self.leader.as_mut().unwrap();
        let i = index.0 as usize - 1;
        if let Some(enc) = &l.tracked[i].encoding {
            return Ok(enc.clone());
        }
        let enc = self
            .params
            .codec
            .encode(MessageId(index.0), &l.plaintext[i])?;
        Ok(enc)
    }

    fn wire(&self, index: LogIndex, fragments: Vec<Fragment>) -> WireEntry {
        let term = self.term_at(index).expect("entry is in the leader's log");
        WireEntry {
            term,
            index,
            fragments: fragments
                .into_iter()
                .map(|fragment| TaggedFragment { term, fragment })
                .collect(),
        }
    }

    fn append_rpc(&self, prev_index: u64, entries: Vec<WireEntry>) -> AppendEntries {
        let l = self.leader.as_ref().unwrap();
        let threshold = |t: u64| {
            (t > 0).then(|| Threshold {
                index: LogIndex(t),
                term: self.term_at(LogIndex(t)).unwrap(),
            })
        };
        AppendEntries {
            term: self.current_term,
            leader: self.id,
            prev_index: LogIndex(prev_index),
            prev_term: self.term_at(LogIndex(prev_index)).unwrap(),
            entries,
            leader_commit: self.commit_index,
            t1: threshold(l.t1),
            t2: threshold(l.t2),
        }
    }

    fn send(&self, to: usize, rpc: AppendEntries, out: &mut Output) {
        out.messages.push(KvMessage {
            from: self.id,
            to: NodeId(to),
            body: KvBody::Append(rpc),
        });
    }

    /// Stores fragments of the leader's own block locally.
    fn store_own(&mut self, index: LogIndex, fragments: Vec<Fragment>) {
        let slot = &mut self.log[index.0 as usize - 1];
        let added = slot.union(fragments);
        self.total_bytes += added;
        if added > 0 {
            self.touched.insert(index.0);
        }
    }

    fn disperse(&mut self, index: LogIndex, out: &mut Output) -> Result<(), KvError> {
        let (n, f, delta) = (
            self.params.n_nodes(),
            self.params.max_faults(),
            self.params.delta(),
        );
        let l = self.leader.as_ref().unwrap();
        let tier = self
            .params
            .tiers
            .lookup((f + 1).max(l.resp_est.saturating_sub(delta)));
        let fp = tier.fragments_per_node;
        let enc = self
            .params
            .codec
            .encode(MessageId(index.0), &l.plaintext[index.0 as usize - 1])?;
        let me = self.id.0;
        let own = self.block_slice(&enc, self.id, 0..fp);
        self.store_own(index, own);
        let mut t = Tracked {
            sent: vec![0; n],
            held: vec![0; n],
            acked: vec![false; n],
            ack_count: 1,
            tier,
            frozen: false,
            timeouts: 0,
            encoding: None,
        };
        t.sent[me] = fp as u16;
        t.held[me] = fp as u16;
        t.acked[me] = true;
        for j in (0..n).filter(|&j| j != me) {
            if self.leader.as_ref().unwrap().next_index[j] == index.0 {
                let entry = self.wire(index, self.block_slice(&enc, NodeId(j), 0..fp));
                let rpc = self.append_rpc(index.0 - 1, vec![entry]);
                self.send(j, rpc, out);
                t.sent[j] = fp as u16;
                self.leader.as_mut().unwrap().next_index[j] = index.0 + 1;
            }
        }
        t.encoding = Some(enc);
        let l = self.leader.as_mut().unwrap();
        let slot = index.0 as usize - 1;
        if slot < l.tracked.len() {
            l.tracked[slot] = t;
        } else {
            debug_assert_eq!(slot, l.tracked.len());
            l.tracked.push(t);
        }
        l.latest = index.0;
        out.arm.push(index);
        Ok(())
    }

    /// Heartbeat: empty append carrying the commit index and thresholds.
    pub fn heartbeat(&mut self) -> Output {
        let mut out = Output::default();
        let Some(l) = &self.leader else {
            return out;
        };
        let next = l.next_index.clone();
        for (j, &nx) in next.iter().enumerate() {
            if j != self.id.0 {
                let rpc = self.append_rpc(nx - 1, Vec::new());
                self.send(j, rpc, &mut out);
            }
        }
        out
    }

    /// Sends the next batch of missed entries to a lagging follower, each
    /// with its block slice up to the entry's current `f_per`.
    fn send_catch_up(&mut self, j: usize, out: &mut Output) -> Result<(), KvError> {
        let last = self.log.len() as u64;
        let from = self.leader.as_ref().unwrap().next_index[j];
        if from > last {
            return Ok(());
        }
        let to = last.min(from + CATCH_UP_BATCH - 1);
        let mut entries = Vec::with_capacity((to - from + 1) as usize);
        for i in from..=to {
            let index = LogIndex(i);
            let enc = self.encoding(index)?;
            let l = self.leader.as_mut().unwrap();
            let t = &mut l.tracked[i as usize - 1];
            let fp = t.tier.fragments_per_node;
            t.sent[j] = t.sent[j].max(fp as u16);
            entries.push(self.wire(index, self.block_slice(&enc, NodeId(j), 0..fp)));
        }
        let rpc = self.append_rpc(from - 1, entries);
        self.send(j, rpc, out);
        let l = self.leader.as_mut().unwrap();
        l.next_index[j] = to + 1;
        l.catch_up[j] = Some(to);
        Ok(())
    }

    pub fn on_response(&mut self, from: NodeId, resp: AppendResponse) -> Result<Output, KvError> {
        let mut out = Output::default();
        if resp.term > self.current_term {
            self.observe_term(resp.term);
            return Ok(out);
        }
        if self.leader.is_none() || resp.term < self.current_term {
            return Ok(out);
        }
        let j = from.0;
        if resp.success {
            let l = self.leader.as_mut().unwrap();
            l.match_index[j] = l.match_index[j].max(resp.index.0);
            if let Some(h) = resp.held {
                self.record_held(resp.index, j, h, &mut out);
            }
            let l = self.leader.as_mut().unwrap();
            if l.catch_up[j] == Some(resp.index.0) {
                l.catch_up[j] = None;
                self.send_catch_up(j, &mut out)?;
            }
        } else {
            let l = self.leader.as_mut().unwrap();
            let p = resp.index.0;
            // Rejections of requests sent before an earlier rewind are stale.
            if l.next_index[j] > p {
                l.next_index[j] = p.min(resp.last_index.0 + 1).max(1);
                l.catch_up[j] = None;
                self.send_catch_up(j, &mut out)?;
            }
        }
        Ok(out)
    }

    fn record_held(&mut self, index: LogIndex, j: usize, held: u16, out: &mut Output) {
        let n = self.params.n_nodes();
        let l = self.leader.as_mut().unwrap();
        let Some(t) = index
            .0
            .checked_sub(1)
            .and_then(|i| l.tracked.get_mut(i as usize))
        else {
            return;
        };
        if held > t.held[j] {
            t.held[j] = held;
        }
        if t.acked[j] || (t.held[j] as usize) < t.tier.fragments_per_node {
            return;
        }
        t.acked[j] = true;
        t.ack_count += 1;
        if !t.frozen {
            if t.ack_count >= t.tier.quorum {
                self.finish(index, out);
            }
            return;
        }
        let count = t.ack_count;
        if l.latest == index.0 {
            // Late acks for the newest entry restore the estimate after a heal.
            l.resp_est = l.resp_est.max(count);
        }
        if count == n && index <= self.commit_index {
            t.encoding = None;
        }
        self.update_thresholds();
    }

    fn finish(&mut self, index: LogIndex, out: &mut Output) {
        let l = self.leader.as_mut().unwrap();
        let t = &mut l.tracked[index.0 as usize - 1];
        t.frozen = true;
        l.resp_est = t.ack_count;
        out.dispersed.push((index, t.timeouts));
        self.advance_commit(out);
        self.update_thresholds();
    }

    /// Commits the longest dispersed prefix ending in a current-term entry
    /// and applies it.
    fn advance_commit(&mut self, out: &mut Output) {
        let l = self.leader.as_ref().unwrap();
        let mut target = self.commit_index.0;
        let mut i = self.commit_index.0 + 1;
        while i <= self.log.len() as u64 && l.tracked[i as usize - 1].frozen {
            if self.log[i as usize - 1].term == self.current_term {
                target = i;
            }
            i += 1;
        }
        if target == self.commit_index.0 {
            return;
        }
        self.commit_index = LogIndex(target);
        let n = self.params.n_nodes();
        let l = self.leader.as_mut().unwrap();
        for i in self.store.last_applied().0 + 1..=target {
            let cmd = KvCommand::from_bytes(&l.plaintext[i as usize - 1])
                .expect("the leader only appends well-formed commands");
            self.store.apply(LogIndex(i), &cmd);
            self.log[i as usize - 1].applied = true;
            out.committed.push(LogIndex(i));
            let t = &mut l.tracked[i as usize - 1];
            if t.ack_count == n {
                t.encoding = None;
            }
        }
    }

    /// Advances `T1`/`T2` over the contiguous run of dispersed entries held
    /// by `⌈3N/4⌉` and by all `N` nodes.
    fn update_thresholds(&mut self) {
        let n = self.params.n_nodes();
        let tq = three_quarters(n);
        let l = self.leader.as_mut().unwrap();
        let ok = |t: &Tracked, need: usize| t.frozen && t.ack_count >= need;
        while (l.t1 as usize) < l.tracked.len() && ok(&l.tracked[l.t1 as usize], tq) {
            l.t1 += 1;
        }
        while (l.t2 as usize) < l.tracked.len() && ok(&l.tracked[l.t2 as usize], n) {
            l.t2 += 1;
        }
        debug_assert!(l.t2 <= l.t1);
        let (t1, t2) = (l.t1, l.t2);
        let threshold = |t: u64| {
            (t > 0).then(|| Threshold {
                index: LogIndex(t),
                term: self.term_at(LogIndex(t)).unwrap(),
            })
        };
        let (t1, t2) = (threshold(t1), threshold(t2));
        self.merge_thresholds(t1, t2);
        if self.params.eager_prune {
            self.prune();
        }
    }

    /// Dissemination timeout for `index`: step down to the tier the current
    /// ack set supports and send the missing fragments.
    pub fn on_timeout(&mut self, term: Term, index: LogIndex) -> Result<Output, KvError> {
        let mut out = Output::default();
        if term != self.current_term {
            return Ok(out);
        }
        let Some(l) = self.leader.as_mut() else {
            return Ok(out);
        };
        let Some(t) = index
            .0
            .checked_sub(1)
            .and_then(|i| l.tracked.get_mut(i as usize))
        else {
            return Ok(out);
        };
        if t.frozen {
            return Ok(out);
        }
        t.timeouts += 1;
        let f = self.params.max_faults();
        let new = self.params.tiers.lookup((f + 1).max(t.ack_count));
        let old_fp = t.tier.fragments_per_node;
        let fp = new.fragments_per_node;
        if fp > old_fp {
            let enc = self.encoding(index)?;
            let me = self.id.0;
            for j in 0..self.params.n_nodes() {
                let l = self.leader.as_ref().unwrap();
                let sent = l.tracked[index.0 as usize - 1].sent[j] as usize;
                if j == me || l.next_index[j] <= index.0 || sent >= fp {
                    continue;
                }
                let entry = self.wire(index, self.block_slice(&enc, NodeId(j), sent..fp));
                let rpc = self.append_rpc(index.0 - 1, vec![entry]);
                self.send(j, rpc, &mut out);
                self.leader.as_mut().unwrap().tracked[index.0 as usize - 1].sent[j] = fp as u16;
            }
            let own = self.block_slice(&enc, self.id, old_fp..fp);
            self.store_own(index, own);
            let t = &mut self.leader.as_mut().unwrap().tracked[index.0 as usize - 1];
            t.sent[me] = fp as u16;
            t.held[me] = fp as u16;
        }
        let t = &mut self.leader.as_mut().unwrap().tracked[index.0 as usize - 1];
        t.tier = new;
        for j in 0..t.acked.len() {
            t.acked[j] = t.held[j] as usize >= fp;
        }
        t.ack_count = t.acked.iter().filter(|&&a| a).count();
        if t.ack_count >= new.quorum {
            self.finish(index, &mut out);
        } else {
            out.arm.push(index);
        }
        Ok(out)
    }

    /// Whether a pending prune would discard anything.
    pub fn prune_pending(&self) -> bool {
        !self.touched.is_empty()
            || self.covered(self.my_t2) > self.pruned_one
            || self.covered(self.my_t1) > self.pruned_two
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(n: usize, f: usize, delta: usize) -> KvParams {
        KvParams::new(n, f, delta, true).unwrap()
    }

    fn leader(n: usize, f: usize, delta: usize) -> (RaftNode, Output) {
        let mut l = RaftNode::new(NodeId(0), params(n, f, delta));
        let out = l.become_leader(Term(1), Vec::new()).unwrap();
        (l, out)
    }

    fn appends(out: &Output) -> Vec<(usize, &AppendEntries)> {
        out.messages
            .iter()
            .filter_map(|m| match &m.body {
                KvBody::Append(a) => Some((m.to.0, a)),
                _ => None,
            })
            .collect()
    }

    fn respond(
        l: &mut RaftNode,
        followers: &mut [RaftNode],
        out: Output,
        allow: &[usize],
    ) -> Output {
        let mut acc = Output::default();
        for m in out.messages {
            if !allow.contains(&m.to.0) {
                continue;
            }
            if let KvBody::Append(a) = m.body {
                for r in followers[m.to.0].on_append_entries(a) {
                    if let KvBody::Response(resp) = r.body {
                        let o = l.on_response(r.from, resp).unwrap();
                        acc.messages.extend(o.messages);
                        acc.dispersed.extend(o.dispersed);
                        acc.committed.extend(o.committed);
                        acc.arm.extend(o.arm);
                    }
                }
            }
        }
        acc
    }

    fn followers(n: usize, f: usize, delta: usize) -> Vec<RaftNode> {
        (0..n)
            .map(|j| RaftNode::new(NodeId(j), params(n, f, delta)))
            .collect()
    }

    #[test]
    fn steady_state_tiers_follow_delta() {
        let (l, out) = leader(5, 2, 0);
        // The no-op goes out at tier (N, 1).
        assert_eq!(
            l.leader_state()
                .unwrap()
                .tier(LogIndex(1))
                .unwrap()
                .fragments_per_node,
            1
        );
        assert!(appends(&out)
            .iter()
            .all(|(_, a)| a.entries[0].fragments.len() == 1));
        let (l, out) = leader(5, 2, 1);
        assert_eq!(
            l.leader_state().unwrap().tier(LogIndex(1)),
            Some(Tier {
                quorum: 4,
                fragments_per_node: 2
            })
        );
        assert_eq!(appends(&out).len(), 4);
    }

    #[test]
    fn commit_applies_and_reaches_t2() {
        let (mut l, out) = leader(5, 2, 0);
        let mut fs = followers(5, 2, 0);
        let r = respond(&mut l, &mut fs, out, &[1, 2, 3, 4]);
        assert_eq!(r.committed, vec![LogIndex(1)]);
        let mut out = Output::default();
        l.append(KvCommand::put("k", "v"), &mut out).unwrap();
        let r = respond(&mut l, &mut fs, out, &[1, 2, 3, 4]);
        assert_eq!(r.committed, vec![LogIndex(2)]);
        assert_eq!(l.leader_get(b"k").unwrap(), Some(b"v".to_vec()));
        assert_eq!(l.leader_get(b"x").unwrap(), None);
        let st = l.leader_state().unwrap();
        assert_eq!((st.t1(), st.t2()), (LogIndex(2), LogIndex(2)));
        assert_eq!(fs[1].leader_get(b"k"), Err(KvError::NotLeader(NodeId(1))));
    }

    #[test]
    fn timeout_steps_down_one_tier_at_a_time() {
        let (mut l, out) = leader(5, 2, 0);
        let mut fs = followers(5, 2, 0);
        // Node 4 is silent: |A| = 4 after the first round.
        let r = respond(&mut l, &mut fs, out, &[1, 2, 3]);
        assert!(r.dispersed.is_empty());
        assert_eq!(l.leader_state().unwrap().ack_count(LogIndex(1)), Some(4));
        let out = l.on_timeout(Term(1), LogIndex(1)).unwrap();
        assert_eq!(
            l.leader_state().unwrap().tier(LogIndex(1)),
            Some(Tier {
                quorum: 4,
                fragments_per_node: 2
            })
        );
        let sends = appends(&out);
        assert_eq!(sends.len(), 4);
        assert!(sends.iter().all(|(_, a)| a.entries[0].fragments.len() == 1));
        let r = respond(&mut l, &mut fs, out, &[1, 2, 3]);
        assert_eq!(r.dispersed, vec![(LogIndex(1), 1)]);
        assert_eq!(l.leader_state().unwrap().resp_est(), 4);
    }

    #[test]
    fn bare_quorum_after_two_timeouts() {
        let (mut l, out) = leader(5, 2, 0);
        let mut fs = followers(5, 2, 0);
        respond(&mut l, &mut fs, out, &[1, 2]);
        let out = l.on_timeout(Term(1), LogIndex(1)).unwrap();
        assert_eq!(
            l.leader_state().unwrap().tier(LogIndex(1)),
            Some(Tier {
                quorum: 3,
                fragments_per_node: 3
            })
        );
        let r = respond(&mut l, &mut fs, out, &[1, 2]);
        assert_eq!(r.dispersed, vec![(LogIndex(1), 1)]);
        assert_eq!(fs[1].slot(LogIndex(1)).unwrap().fragments().len(), 3);
    }

    #[test]
    fn follower_rejects_stale_terms_and_mismatches() {
        let mut f = RaftNode::new(NodeId(1), params(5, 2, 0));
        f.observe_term(Term(3));
        let rpc = |term, prev_index, prev_term| AppendEntries {
            term: Term(term),
            leader: NodeId(0),
            prev_index: LogIndex(prev_index),
            prev_term: Term(prev_term),
            entries: Vec::new(),
            leader_commit: LogIndex(0),
            t1: None,
            t2: None,
        };
        let resp = |m: &KvMessage| match m.body {
            KvBody::Response(r) => r,
            _ => unreachable!(),
        };
        let r = resp(&f.on_append_entries(rpc(2, 0, 0))[0]);
        assert!(!r.success);
        assert_eq!(r.term, Term(3));
        let r = resp(&f.on_append_entries(rpc(3, 4, 1))[0]);
        assert!(!r.success);
        assert_eq!((r.held, r.last_index), (None, LogIndex(0)));
        assert!(resp(&f.on_append_entries(rpc(3, 0, 0))[0]).success);
    }

    fn entry(term: u64, index: u64, frags: &[u16]) -> WireEntry {
        WireEntry {
            term: Term(term),
            index: LogIndex(index),
            fragments: frags
                .iter()
                .map(|&i| TaggedFragment {
                    term: Term(term),
                    fragment: Fragment {
                        message_id: MessageId(index),
                        index: i,
                        original_length: 6,
                        data: vec![0; 2],
                    },
                })
                .collect(),
        }
    }

    fn append(
        term: u64,
        prev: (u64, u64),
        entries: Vec<WireEntry>,
        t1: u64,
        t2: u64,
    ) -> AppendEntries {
        let th = |i: u64| {
            (i > 0).then_some(Threshold {
                index: LogIndex(i),
                term: Term(term),
            })
        };
        AppendEntries {
            term: Term(term),
            leader: NodeId(0),
            prev_index: LogIndex(prev.0),
            prev_term: Term(prev.1),
            entries,
            leader_commit: LogIndex(0),
            t1: th(t1),
            t2: th(t2),
        }
    }

    #[test]
    fn conflicting_suffix_is_truncated() {
        let mut f = RaftNode::new(NodeId(1), params(5, 2, 0));
        f.on_append_entries(append(
            1,
            (0, 0),
            vec![entry(1, 1, &[3]), entry(1, 2, &[3])],
            0,
            0,
        ));
        assert_eq!(f.last_index(), LogIndex(2));
        let out = f.on_append_entries(append(2, (1, 1), vec![entry(2, 2, &[3, 4])], 0, 0));
        assert_eq!(f.term_at(LogIndex(2)), Some(Term(2)));
        assert_eq!(f.total_bytes(), 6);
        let KvBody::Response(r) = out[0].body else {
            unreachable!()
        };
        assert_eq!((r.success, r.held), (true, Some(2)));
    }

    #[test]
    fn mistagged_fragments_are_rejected() {
        let mut f = RaftNode::new(NodeId(1), params(5, 2, 0));
        let mut e = entry(1, 1, &[3]);
        e.fragments[0].term = Term(7);
        let out = f.on_append_entries(append(1, (0, 0), vec![e], 0, 0));
        let KvBody::Response(r) = out[0].body else {
            unreachable!()
        };
        assert!(!r.success);
        assert_eq!(f.last_index(), LogIndex(0));
    }

    #[test]
    fn pruning_follows_thresholds() {
        let mut f = RaftNode::new(NodeId(1), params(5, 2, 0));
        let entries = (1..=3).map(|i| entry(1, i, &[3, 4, 5])).collect();
        let out = f.on_append_entries(append(1, (0, 0), entries, 2, 1));
        // Acks report pre-prune counts.
        assert!(out.iter().all(|m| matches!(
            m.body,
            KvBody::Response(AppendResponse { held: Some(3), .. })
        )));
        let held: Vec<usize> = f.log().iter().map(|s| s.fragments().len()).collect();
        assert_eq!(held, vec![1, 2, 3]);
        assert_eq!(f.slot(LogIndex(1)).unwrap().fragments()[0].index, 3);
        // A threshold naming an entry the follower does not hold is ignored.
        let mut g = RaftNode::new(NodeId(1), params(5, 2, 0));
        g.on_append_entries(append(1, (0, 0), vec![entry(1, 1, &[3, 4, 5])], 0, 0));
        g.on_append_entries(append(2, (1, 1), Vec::new(), 1, 1));
        assert_eq!(g.slot(LogIndex(1)).unwrap().fragments().len(), 3);
    }

    #[test]
    fn lazy_pruning_waits_for_an_explicit_prune() {
        let mut f = RaftNode::new(NodeId(1), KvParams::new(5, 2, 0, false).unwrap());
        f.on_append_entries(append(1, (0, 0), vec![entry(1, 1, &[3, 4, 5])], 1, 1));
        assert!(f.prune_pending());
        assert_eq!(f.total_bytes(), 6);
        assert_eq!(f.prune(), 2);
        assert_eq!(f.total_bytes(), 2);
        assert!(!f.prune_pending());
    }

    #[test]
    fn rejected_follower_is_caught_up_in_batches() {
        let (mut l, out) = leader(5, 2, 0);
        let mut fs = followers(5, 2, 0);
        respond(&mut l, &mut fs, out, &[1, 2, 3, 4]);
        for i in 0..3 {
            let mut out = Output::default();
            let index = l
                .append(KvCommand::put(format!("k{i}"), "v"), &mut out)
                .unwrap();
            respond(&mut l, &mut fs, out, &[1, 2, 3]);
            let out = l.on_timeout(Term(1), index).unwrap();
            respond(&mut l, &mut fs, out, &[1, 2, 3]);
            assert!(l.leader_state().unwrap().is_dispersed(index));
        }
        assert_eq!(fs[4].last_index(), LogIndex(1));
        // A heartbeat exposes the gap; one catch-up message fills it.
        let hb = l.heartbeat();
        let r = respond(&mut l, &mut fs, hb, &[4]);
        assert_eq!(appends(&r).len(), 1);
        assert_eq!(appends(&r)[0].1.entries.len(), 3);
        let r = respond(&mut l, &mut fs, r, &[4]);
        assert!(r.messages.is_empty());
        assert_eq!(fs[4].last_index(), LogIndex(4));
        let st = l.leader_state().unwrap();
        assert_eq!(st.ack_count(LogIndex(4)), Some(5));
        assert_eq!(st.t2(), LogIndex(4));
    }

    #[test]
    fn higher_term_response_steps_down() {
        let (mut l, _) = leader(5, 2, 0);
        let resp = AppendResponse {
            term: Term(4),
            success: false,
            index: LogIndex(0),
            held: None,
            last_index: LogIndex(0),
        };
        l.on_response(NodeId(2), resp).unwrap();
        assert!(!l.is_leader());
        assert_eq!(l.current_term(), Term(4));
    }

    #[test]
    fn committed_entries_cannot_be_truncated() {
        let (mut l, out) = leader(5, 2, 0);
        let mut fs = followers(5, 2, 0);
        respond(&mut l, &mut fs, out, &[1, 2, 3, 4]);
        assert!(matches!(
            l.truncate_from(LogIndex(1)),
            Err(KvError::CommittedTruncation { .. })
        ));
    }
}
