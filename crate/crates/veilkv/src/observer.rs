//! The adversary's view: an append-only trace of every wire-visible storage
//! operation, plus proxy-side instrumentation events, and the verdict
//! functions that check the system's obliviousness and equivalence claims
//! against recorded traces.
//!
//! Wire events (`local == false`) carry exactly what an observer sitting on
//! the storage server sees: operation kind, coordinates, payload length, and
//! counters. Local events (`local == true`) are proxy-side instrumentation —
//! logical path requests, physical-op shadows tagged with their origin, and
//! trusted-counter updates — used by tests but never visible on the wire.
//! Enabling or disabling the observer changes no proxy or server behavior.
//!
//! Trace export is line-delimited, one event per line, fields in the order:
//! `seq tick epoch batch kind origin bucket slot version leaf len local`.
//!
//! The chi-square acceptance below is a practical check of the uniformity
//! claims, not a proof; the underlying indistinguishability argument is
//! computational.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use crate::config::TreeGeometry;
use crate::error::{Error, Result};
use crate::stats::{self, ChiSquare};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EventKind {
    SlotRead,
    BucketWrite,
    LogAppend,
    LogRead,
    Rollback,
    /// Logical path request (leaf index), proxy-side only.
    PathAccess,
    /// Trusted-counter update, proxy-side only.
    CounterUpdate,
}

impl EventKind {
    fn token(self) -> &'static str {
        match self {
            EventKind::SlotRead => "read",
            EventKind::BucketWrite => "write",
            EventKind::LogAppend => "log_append",
            EventKind::LogRead => "log_read",
            EventKind::Rollback => "rollback",
            EventKind::PathAccess => "path",
            EventKind::CounterUpdate => "counter",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "read" => EventKind::SlotRead,
            "write" => EventKind::BucketWrite,
            "log_append" => EventKind::LogAppend,
            "log_read" => EventKind::LogRead,
            "rollback" => EventKind::Rollback,
            "path" => EventKind::PathAccess,
            "counter" => EventKind::CounterUpdate,
            other => return Err(Error::Protocol(format!("unknown event kind {other:?}"))),
        })
    }
}

/// Why the proxy issued a physical operation. Only instrumentation events
/// carry a meaningful origin; the wire never does.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Origin {
    Access,
    Evict,
    Reshuffle,
    Init,
    Replay,
    None,
}

impl Origin {
    fn token(self) -> &'static str {
        match self {
            Origin::Access => "access",
            Origin::Evict => "evict",
            Origin::Reshuffle => "reshuffle",
            Origin::Init => "init",
            Origin::Replay => "replay",
            Origin::None => "-",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "access" => Origin::Access,
            "evict" => Origin::Evict,
            "reshuffle" => Origin::Reshuffle,
            "init" => Origin::Init,
            "replay" => Origin::Replay,
            "-" => Origin::None,
            other => return Err(Error::Protocol(format!("unknown origin {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEvent {
    pub seq: u64,
    pub tick: u64,
    /// Epoch in progress when the event fired.
    pub epoch: u64,
    /// Read-batch index within the epoch; `u32::MAX` outside batch windows.
    pub batch: u32,
    pub kind: EventKind,
    pub origin: Origin,
    pub bucket: u32,
    pub slot: u16,
    pub version: u64,
    pub leaf: u64,
    pub len: usize,
    pub local: bool,
}

pub const NO_BATCH: u32 = u32::MAX;

/// Shared position stamp; the proxy advances it as epochs and batches
/// progress so every event records where in the schedule it happened.
#[derive(Debug, Default)]
struct Position {
    tick: AtomicU64,
    epoch: AtomicU64,
    batch: AtomicU64,
}

/// Ordered sink for trace events. Producers may be concurrent; each event
/// gets a unique sequence number at ingestion.
#[derive(Debug)]
pub struct Observer {
    events: Mutex<Vec<TraceEvent>>,
    seq: AtomicU64,
    position: Position,
    enabled: bool,
}

impl Observer {
    pub fn new() -> Self {
        Observer {
            events: Mutex::new(Vec::new()),
            seq: AtomicU64::new(0),
            position: Position::default(),
            enabled: true,
        }
    }

    /// An observer that drops everything; behavior of the system under test
    /// must be identical either way.
    pub fn disabled() -> Self {
        Observer { enabled: false, ..Observer::new() }
    }

    pub fn set_position(&self, tick: u64, epoch: u64, batch: u32) {
        self.position.tick.store(tick, Ordering::Relaxed);
        self.position.epoch.store(epoch, Ordering::Relaxed);
        self.position.batch.store(batch as u64, Ordering::Relaxed);
    }

    #[allow(clippy::too_many_arguments)]
    pub fn record(
        &self,
        kind: EventKind,
        origin: Origin,
        bucket: u32,
        slot: u16,
        version: u64,
        leaf: u64,
        len: usize,
        local: bool,
    ) {
        if !self.enabled {
            return;
        }
        let event = TraceEvent {
            seq: self.seq.fetch_add(1, Ordering::Relaxed),
            tick: self.position.tick.load(Ordering::Relaxed),
            epoch: self.position.epoch.load(Ordering::Relaxed),
            batch: self.position.batch.load(Ordering::Relaxed) as u32,
            kind,
            origin,
            bucket,
            slot,
            version,
            leaf,
            len,
            local,
        };
        self.events.lock().unwrap().push(event);
    }

    /// Snapshot of all events in sequence order.
    pub fn events(&self) -> Vec<TraceEvent> {
        let mut out = self.events.lock().unwrap().clone();
        out.sort_by_key(|e| e.seq);
        out
    }

    pub fn clear(&self) {
        self.events.lock().unwrap().clear();
    }

    pub fn export(&self) -> String {
        let mut out = String::new();
        for e in self.events() {
            out.push_str(&format!(
                "{} {} {} {} {} {} {} {} {} {} {} {}\n",
                e.seq,
                e.tick,
                e.epoch,
                e.batch,
                e.kind.token(),
                e.origin.token(),
                e.bucket,
                e.slot,
                e.version,
                e.leaf,
                e.len,
                if e.local { 1 } else { 0 },
            ));
        }
        out
    }

    pub fn import(text: &str) -> Result<Vec<TraceEvent>> {
        let mut out = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 12 {
                return Err(Error::Protocol(format!(
                    "trace line {}: expected 12 fields, got {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            let num = |i: usize| -> Result<u64> {
                fields[i]
                    .parse::<u64>()
                    .map_err(|_| Error::Protocol(format!("trace line {}: bad field {}", lineno + 1, i)))
            };
            out.push(TraceEvent {
                seq: num(0)?,
                tick: num(1)?,
                epoch: num(2)?,
                batch: num(3)? as u32,
                kind: EventKind::parse(fields[4])?,
                origin: Origin::parse(fields[5])?,
                bucket: num(6)? as u32,
                slot: num(7)? as u16,
                version: num(8)?,
                leaf: num(9)?,
                len: num(10)? as usize,
                local: num(11)? != 0,
            });
        }
        Ok(out)
    }
}

impl Default for Observer {
    fn default() -> Self {
        Self::new()
    }
}

// ---------------------------------------------------------------------------
// Verdicts
// ---------------------------------------------------------------------------

/// Outcome of a statistical test that needs a minimum sample size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Uniformity {
    Inconclusive { samples: usize, needed: usize },
    Tested(ChiSquare),
}

/// Chi-square goodness of fit of requested path leaves against the uniform
/// distribution. Requires at least `50 * leaf_count` logical path requests.
pub fn leaf_uniformity_test(events: &[TraceEvent], geometry: &TreeGeometry) -> Uniformity {
    let leaves = leaf_histogram(events, geometry);
    let samples: u64 = leaves.iter().sum();
    let needed = 50 * geometry.leaf_count() as usize;
    if (samples as usize) < needed {
        return Uniformity::Inconclusive { samples: samples as usize, needed };
    }
    Uniformity::Tested(stats::uniform_fit(&leaves))
}

/// Histogram of requested path leaves from the proxy's logical path
/// instrumentation.
pub fn leaf_histogram(events: &[TraceEvent], geometry: &TreeGeometry) -> Vec<u64> {
    let mut counts = vec![0u64; geometry.leaf_count() as usize];
    for e in events {
        if e.kind == EventKind::PathAccess {
            counts[e.leaf as usize] += 1;
        }
    }
    counts
}

/// A physical slot read twice between writes of its bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotReuse {
    pub seq: u64,
    pub bucket: u32,
    pub slot: u16,
}

/// Scan wire events for bucket-invariant violations: no physical slot may be
/// read twice between two writes of its bucket. A rollback resets every
/// reuse window, since deterministic crash replay legitimately repeats the
/// aborted epoch's reads.
pub fn slot_reuse_check(events: &[TraceEvent]) -> Vec<SlotReuse> {
    use std::collections::{HashMap, HashSet};
    let mut windows: HashMap<u32, HashSet<u16>> = HashMap::new();
    let mut violations = Vec::new();
    for e in events.iter().filter(|e| !e.local) {
        match e.kind {
            EventKind::SlotRead => {
                if !windows.entry(e.bucket).or_default().insert(e.slot) {
                    violations.push(SlotReuse { seq: e.seq, bucket: e.bucket, slot: e.slot });
                }
            }
            EventKind::BucketWrite => {
                windows.remove(&e.bucket);
            }
            EventKind::Rollback => {
                windows.clear();
            }
            _ => {}
        }
    }
    violations
}

/// Verdict of the parallel-vs-sequential physical equivalence check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEquivalence {
    pub reads_match: bool,
    pub writes_match: bool,
    pub missing_reads: Vec<ReadCoord>,
    pub extra_reads: Vec<ReadCoord>,
    pub missing_writes: Vec<WriteCoord>,
    pub extra_writes: Vec<WriteCoord>,
}

impl TraceEquivalence {
    pub fn holds(&self) -> bool {
        self.reads_match && self.writes_match
    }
}

/// Physical read coordinates: (bucket, slot, version at read).
pub type ReadCoord = (u32, u16, u64);
/// Bucket write coordinates: (bucket, new version).
pub type WriteCoord = (u32, u64);

/// The expected one-epoch physical operation set of the batched executor,
/// derived purely from a sequential reference trace.
///
/// The walk simulates the batched discipline over the whole trace, epoch by
/// epoch: reads of a bucket already rewritten in the same epoch are served
/// from the write buffer and issue nothing physical; every other sequential
/// read issues exactly once; a rewrite consumes whatever is still physically
/// unread in the bucket (the expansion), then restores full validity; only
/// the last rewrite of a bucket per epoch is flushed. Physical slot validity
/// therefore carries across epochs under these rules, not under the raw
/// sequential reads.
pub fn expand_sequential_epoch(
    sequential: &[TraceEvent],
    epoch: u64,
    slots_per_bucket: usize,
) -> (Vec<ReadCoord>, Vec<WriteCoord>) {
    use std::collections::{BTreeMap, HashMap, HashSet};
    // Physical state under the batched discipline.
    let mut valid: HashMap<u32, Vec<bool>> = HashMap::new();
    let mut version: HashMap<u32, u64> = HashMap::new();
    // Per-epoch state.
    let mut current_epoch = u64::MAX;
    let mut written_this_epoch: HashSet<u32> = HashSet::new();
    let mut last_write: BTreeMap<u32, u64> = BTreeMap::new();

    let mut expected_reads: Vec<ReadCoord> = Vec::new();
    let mut expected_writes: Vec<WriteCoord> = Vec::new();

    'walk: for e in sequential.iter().filter(|e| e.local) {
        if e.epoch != current_epoch {
            if current_epoch == epoch {
                break 'walk;
            }
            current_epoch = e.epoch;
            written_this_epoch.clear();
            last_write.clear();
        }
        let in_epoch = e.epoch == epoch;
        match e.kind {
            EventKind::SlotRead => {
                if written_this_epoch.contains(&e.bucket) {
                    continue;
                }
                let slots = valid.entry(e.bucket).or_insert_with(|| vec![true; slots_per_bucket]);
                if slots[e.slot as usize] {
                    slots[e.slot as usize] = false;
                    if in_epoch {
                        expected_reads.push((e.bucket, e.slot, e.version));
                    }
                }
            }
            EventKind::BucketWrite => {
                if !written_this_epoch.contains(&e.bucket)
                    && matches!(e.origin, Origin::Evict | Origin::Reshuffle)
                {
                    // Expansion: the rewrite consumes the remainder of the
                    // previous version, even when its read phase was empty.
                    let v = *version.get(&e.bucket).unwrap_or(&0);
                    let slots =
                        valid.entry(e.bucket).or_insert_with(|| vec![true; slots_per_bucket]);
                    for (slot, is_valid) in slots.iter_mut().enumerate() {
                        if *is_valid {
                            *is_valid = false;
                            if in_epoch {
                                expected_reads.push((e.bucket, slot as u16, v));
                            }
                        }
                    }
                }
                written_this_epoch.insert(e.bucket);
                if in_epoch {
                    last_write.insert(e.bucket, e.version);
                }
                version.insert(e.bucket, e.version);
                valid.insert(e.bucket, vec![true; slots_per_bucket]);
            }
            _ => {}
        }
    }
    expected_writes.extend(last_write.iter().map(|(&b, &v)| (b, v)));
    (expected_reads, expected_writes)
}

/// Compare one epoch of a batched-executor wire trace against the expansion
/// of the sequential reference trace for the same logical batches.
pub fn trace_equivalence(
    parallel: &[TraceEvent],
    sequential: &[TraceEvent],
    epoch: u64,
    slots_per_bucket: usize,
) -> TraceEquivalence {
    use std::collections::BTreeMap;
    let (expected_reads, expected_writes) =
        expand_sequential_epoch(sequential, epoch, slots_per_bucket);

    let mut observed_reads: BTreeMap<ReadCoord, usize> = BTreeMap::new();
    let mut observed_writes: BTreeMap<u32, u64> = BTreeMap::new();
    for e in parallel.iter().filter(|e| !e.local && e.epoch == epoch) {
        match e.kind {
            EventKind::SlotRead => {
                *observed_reads.entry((e.bucket, e.slot, e.version)).or_insert(0) += 1;
            }
            EventKind::BucketWrite => {
                observed_writes.insert(e.bucket, e.version);
            }
            _ => {}
        }
    }

    let mut expected_read_set: BTreeMap<ReadCoord, usize> = BTreeMap::new();
    for r in &expected_reads {
        *expected_read_set.entry(*r).or_insert(0) += 1;
    }

    let mut missing_reads = Vec::new();
    let mut extra_reads = Vec::new();
    for (coord, &n) in &expected_read_set {
        let got = observed_reads.get(coord).copied().unwrap_or(0);
        for _ in got..n {
            missing_reads.push(*coord);
        }
    }
    for (coord, &n) in &observed_reads {
        let want = expected_read_set.get(coord).copied().unwrap_or(0);
        for _ in want..n {
            extra_reads.push(*coord);
        }
    }

    let expected_writes: BTreeMap<u32, u64> = expected_writes.into_iter().collect();
    let mut missing_writes = Vec::new();
    let mut extra_writes = Vec::new();
    for (&b, &v) in &expected_writes {
        if observed_writes.get(&b) != Some(&v) {
            missing_writes.push((b, v));
        }
    }
    for (&b, &v) in &observed_writes {
        if expected_writes.get(&b) != Some(&v) {
            extra_writes.push((b, v));
        }
    }

    TraceEquivalence {
        reads_match: missing_reads.is_empty() && extra_reads.is_empty(),
        writes_match: missing_writes.is_empty() && extra_writes.is_empty(),
        missing_reads,
        extra_reads,
        missing_writes,
        extra_writes,
    }
}

/// Verdict of the dual-run workload-independence check.
#[derive(Debug, Clone, PartialEq)]
pub struct Independence {
    /// Wire traces are structurally identical: same per-epoch batch
    /// cadence and per-kind event counts and payload lengths.
    pub structural_equal: bool,
    /// First epoch index whose structure diverges.
    pub first_divergence: Option<usize>,
    /// Two-sample test over requested-leaf histograms.
    pub leaf_test: ChiSquare,
}

/// The per-epoch structure of one epoch's wire trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochStructure {
    pub epoch: u64,
    /// Read-batch cadence: (batch index, tick) pairs observed.
    pub batches: Vec<(u32, u64)>,
    /// Event counts keyed by (kind, payload length).
    pub counts: Vec<((EventKind, usize), usize)>,
}

/// Structural projection of a wire trace: the deterministic shape the
/// schedule fixes — per epoch, the batch cadence and the count of events of
/// each kind and payload length. Physical coordinates (and therefore the
/// exact interleaving of access reads with eviction read phases) are
/// random and belong to the statistical comparison, not the structural one.
pub fn structural_projection(events: &[TraceEvent]) -> Vec<EpochStructure> {
    use std::collections::BTreeMap;
    type Cadence = BTreeMap<(u32, u64), ()>;
    type Counts = BTreeMap<(EventKind, usize), usize>;
    let mut epochs: BTreeMap<u64, (Cadence, Counts)> = BTreeMap::new();
    for e in events.iter().filter(|e| !e.local) {
        let entry = epochs.entry(e.epoch).or_default();
        if e.batch != NO_BATCH {
            entry.0.insert((e.batch, e.tick), ());
        }
        *entry.1.entry((e.kind, e.len)).or_insert(0) += 1;
    }
    epochs
        .into_iter()
        .map(|(epoch, (batches, counts))| EpochStructure {
            epoch,
            batches: batches.into_keys().collect(),
            counts: counts.into_iter().collect(),
        })
        .collect()
}

/// Compare two runs with identical configuration but different logical
/// workloads: their structural projections must match exactly and their
/// leaf distributions must be statistically indistinguishable.
pub fn workload_independence_test(
    a: &[TraceEvent],
    b: &[TraceEvent],
    geometry: &TreeGeometry,
) -> Independence {
    let pa = structural_projection(a);
    let pb = structural_projection(b);
    let mut first_divergence = None;
    if pa != pb {
        let upto = pa.len().min(pb.len());
        let at = (0..upto).find(|&i| pa[i] != pb[i]).unwrap_or(upto);
        first_divergence = Some(at);
    }
    let leaf_test = stats::two_sample(&leaf_histogram(a, geometry), &leaf_histogram(b, geometry));
    Independence { structural_equal: pa == pb, first_divergence, leaf_test }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wire_read(seq: u64, epoch: u64, bucket: u32, slot: u16, version: u64) -> TraceEvent {
        TraceEvent {
            seq,
            tick: 0,
            epoch,
            batch: 0,
            kind: EventKind::SlotRead,
            origin: Origin::None,
            bucket,
            slot,
            version,
            leaf: 0,
            len: 0,
            local: false,
        }
    }

    fn wire_write(seq: u64, epoch: u64, bucket: u32, version: u64) -> TraceEvent {
        TraceEvent {
            kind: EventKind::BucketWrite,
            ..wire_read(seq, epoch, bucket, 0, version)
        }
    }

    #[test]
    fn slot_reuse_detects_repeat() {
        let trace = vec![
            wire_read(0, 1, 5, 2, 0),
            wire_read(1, 1, 5, 3, 0),
            wire_read(2, 1, 5, 2, 0),
        ];
        let v = slot_reuse_check(&trace);
        assert_eq!(v, vec![SlotReuse { seq: 2, bucket: 5, slot: 2 }]);
    }

    #[test]
    fn slot_reuse_window_resets_on_write() {
        let trace = vec![
            wire_read(0, 1, 5, 2, 0),
            wire_write(1, 1, 5, 1),
            wire_read(2, 1, 5, 2, 1),
        ];
        assert!(slot_reuse_check(&trace).is_empty());
    }

    #[test]
    fn slot_reuse_window_resets_on_rollback() {
        let mut rollback = wire_read(1, 1, 0, 0, 0);
        rollback.kind = EventKind::Rollback;
        let trace = vec![wire_read(0, 1, 5, 2, 0), rollback, wire_read(2, 1, 5, 2, 0)];
        assert!(slot_reuse_check(&trace).is_empty());
    }

    #[test]
    fn export_import_round_trips() {
        let obs = Observer::new();
        obs.set_position(3, 1, 0);
        obs.record(EventKind::SlotRead, Origin::None, 7, 2, 4, 0, 60, false);
        obs.record(EventKind::PathAccess, Origin::Access, 0, 0, 0, 5, 0, true);
        let text = obs.export();
        let imported = Observer::import(&text).unwrap();
        assert_eq!(imported, obs.events());
    }

    #[test]
    fn degenerate_leaf_trace_rejected() {
        let geometry = TreeGeometry {
            levels: 2,
            real_slots: 1,
            dummy_slots: 2,
            evict_period: 3,
            capacity: 4,
        };
        let mut events = Vec::new();
        for seq in 0..400u64 {
            events.push(TraceEvent {
                seq,
                tick: 0,
                epoch: 1,
                batch: 0,
                kind: EventKind::PathAccess,
                origin: Origin::Access,
                bucket: 0,
                slot: 0,
                version: 0,
                leaf: 1,
                len: 0,
                local: true,
            });
        }
        match leaf_uniformity_test(&events, &geometry) {
            Uniformity::Tested(t) => assert!(t.p_value < 1e-12),
            other => panic!("expected a verdict, got {other:?}"),
        }
    }

    #[test]
    fn insufficient_samples_inconclusive() {
        let geometry = TreeGeometry {
            levels: 4,
            real_slots: 1,
            dummy_slots: 2,
            evict_period: 3,
            capacity: 16,
        };
        match leaf_uniformity_test(&[], &geometry) {
            Uniformity::Inconclusive { samples, needed } => {
                assert_eq!(samples, 0);
                assert_eq!(needed, 800);
            }
            other => panic!("expected inconclusive, got {other:?}"),
        }
    }

    #[test]
    fn equivalence_detects_single_slot_difference() {
        // Sequential trace: one access read in epoch 1.
        let mut seq_trace = vec![wire_read(0, 1, 2, 1, 0)];
        seq_trace[0].local = true;
        seq_trace[0].origin = Origin::Access;
        let parallel_ok = vec![wire_read(0, 1, 2, 1, 0)];
        let parallel_bad = vec![wire_read(0, 1, 2, 2, 0)];
        assert!(trace_equivalence(&parallel_ok, &seq_trace, 1, 3).holds());
        let verdict = trace_equivalence(&parallel_bad, &seq_trace, 1, 3);
        assert!(!verdict.holds());
        assert_eq!(verdict.missing_reads, vec![(2, 1, 0)]);
        assert_eq!(verdict.extra_reads, vec![(2, 2, 0)]);
    }

    #[test]
    fn expansion_dedups_and_buffers() {
        // Epoch 1: access reads slot (5,0); bucket 5 evicted -> expansion
        // reads remaining slots 1,2; bucket written; later access read of the
        // rewritten bucket is buffer-served (vanishes).
        let mk = |seq, kind, origin, bucket, slot, version| {
            let mut e = wire_read(seq, 1, bucket, slot, version);
            e.kind = kind;
            e.origin = origin;
            e.local = true;
            e
        };
        let trace = vec![
            mk(0, EventKind::SlotRead, Origin::Access, 5, 0, 0),
            mk(1, EventKind::SlotRead, Origin::Evict, 5, 1, 0),
            mk(2, EventKind::SlotRead, Origin::Evict, 5, 2, 0),
            mk(3, EventKind::BucketWrite, Origin::Evict, 5, 0, 1),
            mk(4, EventKind::SlotRead, Origin::Access, 5, 0, 1),
        ];
        let (reads, writes) = expand_sequential_epoch(&trace, 1, 3);
        assert_eq!(reads, vec![(5, 0, 0), (5, 1, 0), (5, 2, 0)]);
        assert_eq!(writes, vec![(5, 1)]);
    }

    #[test]
    fn structural_projection_ignores_coordinates() {
        let a = vec![wire_read(0, 1, 2, 1, 0)];
        let b = vec![wire_read(0, 1, 9, 7, 0)];
        assert_eq!(structural_projection(&a), structural_projection(&b));
        // A different payload length is structural.
        let mut c = wire_read(0, 1, 2, 1, 0);
        c.len = 99;
        assert_ne!(structural_projection(&a), structural_projection(&[c]));
    }
}
