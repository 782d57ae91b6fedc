//! Multiversioned timestamp ordering with visible uncommitted writes.
//!
//! Each transaction gets a unique timestamp fixing its serialization order.
//! Writes insert versions into per-object chains; reads return the latest
//! version at or below the reader's timestamp and raise the version's read
//! marker. A write below an already-raised read marker aborts, so no reader
//! ever misses a write that precedes it in the serialization order.
//! Transactions that observe uncommitted versions record the writer as a
//! dependency and abort if any dependency aborts.

use std::collections::{BTreeMap, BTreeSet};

use crate::oram::ObjectId;

pub type Timestamp = u64;

/// Version chains bootstrap from the store with a committed base version
/// carrying this writer timestamp.
pub const BASE_WRITER: Timestamp = 0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainVersion {
    /// Position in this epoch's serialization order; `BASE_WRITER` for the
    /// pre-epoch version, which every transaction of the epoch follows.
    pub writer: Timestamp,
    /// The transaction that actually produced the value: equal to `writer`
    /// for in-epoch versions, and the previous epoch's committed writer
    /// (or `BASE_WRITER` for genesis data) for the base version.
    pub origin_writer: Timestamp,
    pub value: Vec<u8>,
    /// Highest timestamp that has read this version.
    pub read_marker: Timestamp,
}

/// Per-object version chain, ascending by writer timestamp.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VersionChain {
    versions: Vec<ChainVersion>,
}

/// Outcome of a write attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteOutcome {
    Ok,
    /// A later-timestamped transaction already read the version this write
    /// would have to precede.
    Conflict { marker: Timestamp },
}

impl VersionChain {
    pub fn with_base(value: Vec<u8>) -> Self {
        Self::with_base_from(BASE_WRITER, value)
    }

    pub fn with_base_from(origin_writer: Timestamp, value: Vec<u8>) -> Self {
        VersionChain {
            versions: vec![ChainVersion {
                writer: BASE_WRITER,
                origin_writer,
                value,
                read_marker: BASE_WRITER,
            }],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.versions.is_empty()
    }

    pub fn has_base(&self) -> bool {
        self.versions.first().map(|v| v.writer == BASE_WRITER).unwrap_or(false)
    }

    /// Install the committed pre-epoch value fetched from the store,
    /// attributed to the transaction that committed it. Earlier uncommitted
    /// in-epoch writes may already be present.
    pub fn install_base(&mut self, origin_writer: Timestamp, value: Vec<u8>) {
        if self.has_base() {
            return;
        }
        self.versions.insert(
            0,
            ChainVersion { writer: BASE_WRITER, origin_writer, value, read_marker: BASE_WRITER },
        );
    }

    /// Latest version at or below `ts` (a transaction sees its own writes).
    /// Updates the version's read marker and returns the producing
    /// transaction.
    pub fn read_for(&mut self, ts: Timestamp) -> Option<(&[u8], Timestamp)> {
        let v = self.versions.iter_mut().rev().find(|v| v.writer <= ts)?;
        v.read_marker = v.read_marker.max(ts);
        Some((&v.value, v.origin_writer))
    }

    /// Insert a version at `ts` unless a later reader has already observed
    /// the version this write would supersede.
    pub fn write(&mut self, ts: Timestamp, value: Vec<u8>) -> WriteOutcome {
        if let Some(v) = self.versions.iter().rev().find(|v| v.writer < ts) {
            if v.read_marker > ts {
                return WriteOutcome::Conflict { marker: v.read_marker };
            }
        }
        let at = self.versions.partition_point(|v| v.writer < ts);
        if self.versions.get(at).map(|v| v.writer == ts).unwrap_or(false) {
            // Re-write by the same transaction replaces its version.
            self.versions[at].value = value;
        } else {
            self.versions.insert(
                at,
                ChainVersion { writer: ts, origin_writer: ts, value, read_marker: ts },
            );
        }
        WriteOutcome::Ok
    }

    /// Excise an aborted transaction's version so no later read observes it.
    pub fn remove_writer(&mut self, ts: Timestamp) {
        self.versions.retain(|v| v.writer != ts);
    }

    /// Latest version by a committed transaction, given the committed set.
    pub fn latest_committed(&self, committed: &BTreeSet<Timestamp>) -> Option<&ChainVersion> {
        self.versions
            .iter()
            .rev()
            .find(|v| v.writer != BASE_WRITER && committed.contains(&v.writer))
    }

    pub fn versions(&self) -> &[ChainVersion] {
        &self.versions
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TxnStatus {
    Active,
    /// Commit requested; outcome decided at epoch end.
    Completed,
    Committed,
    Aborted,
}

/// Why a transaction aborted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AbortReason {
    WriteConflict,
    /// Still running when its epoch ended.
    Unfinished,
    /// A dependency aborted.
    Cascade,
    /// Evicted to fit the epoch's write-batch capacity.
    WriteBatchOverflow,
    /// No read-batch slot left in the epoch.
    BatchesFull,
    /// Client-requested abort.
    Voluntary,
}

#[derive(Debug, Clone)]
pub struct TxnRecord {
    pub ts: Timestamp,
    pub epoch: u64,
    pub status: TxnStatus,
    pub abort_reason: Option<AbortReason>,
    /// Writers of uncommitted versions this transaction observed.
    pub deps: BTreeSet<Timestamp>,
    /// (object, version writer) pairs observed, for the serializability
    /// checker.
    pub reads: Vec<(ObjectId, Timestamp)>,
    pub writes: BTreeSet<ObjectId>,
}

impl TxnRecord {
    pub fn new(ts: Timestamp, epoch: u64) -> Self {
        TxnRecord {
            ts,
            epoch,
            status: TxnStatus::Active,
            abort_reason: None,
            deps: BTreeSet::new(),
            reads: Vec::new(),
            writes: BTreeSet::new(),
        }
    }
}

/// Resolve an epoch: unfinished transactions abort, aborts cascade through
/// dependency edges, everything else commits. Deterministic given the
/// input sets.
pub fn resolve_epoch(txns: &mut BTreeMap<Timestamp, TxnRecord>) {
    for txn in txns.values_mut() {
        if txn.status == TxnStatus::Active {
            txn.status = TxnStatus::Aborted;
            txn.abort_reason = Some(AbortReason::Unfinished);
        }
    }
    cascade_aborts(txns);
    for txn in txns.values_mut() {
        if txn.status == TxnStatus::Completed {
            txn.status = TxnStatus::Committed;
        }
    }
}

/// Abort every completed transaction that depends (transitively) on an
/// aborted one.
pub fn cascade_aborts(txns: &mut BTreeMap<Timestamp, TxnRecord>) {
    loop {
        let aborted: BTreeSet<Timestamp> = txns
            .values()
            .filter(|t| t.status == TxnStatus::Aborted)
            .map(|t| t.ts)
            .collect();
        let mut changed = false;
        for txn in txns.values_mut() {
            if txn.status != TxnStatus::Aborted && !txn.deps.is_disjoint(&aborted) {
                txn.status = TxnStatus::Aborted;
                txn.abort_reason.get_or_insert(AbortReason::Cascade);
                changed = true;
            }
        }
        if !changed {
            return;
        }
    }
}
