//! The trusted proxy: client-facing transactions, epoch scheduling, the
//! version cache, durability ordering, crash injection, and recovery.
//!
//! Time advances in logical ticks. Read batch `b` fires at tick
//! `(b + 1) * batch_interval` of the epoch; the epoch finalizes one interval
//! after the last batch. Every externally visible or persistent step is
//! guarded by a crash hook so tests can kill the proxy at each point the
//! durability argument cares about.
//!
//! Durability ordering per batch: plan, append the path log, advance the
//! trusted batch counter, then execute the physical reads. At epoch end:
//! append the write-phase log, advance the batch counter, execute the write
//! phase's eviction reads, flush the deduplicated bucket writes, append the
//! checkpoint, advance the trusted epoch counter, and only then release
//! commit notifications.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use crate::config::SystemConfig;
use crate::crypto::{Derivation, KeyMaterial, Sealer};
use crate::durability::{
    batch_counter, CursorUpdate, DeltaCheckpoint, FullBucket, FullCheckpoint, LoggedPath,
    PathLogRecord, RecordCodec, RewrittenBucket, TrustedCounter, SLOT_SENTINEL,
};
use crate::error::{Error, Result};
use crate::exec::EpochPipeline;
use crate::mvtso::{self, AbortReason, Timestamp, TxnRecord, TxnStatus, VersionChain, BASE_WRITER};
use crate::observer::{EventKind, Observer, Origin, NO_BATCH};
use crate::oram::{LogicalSlot, ObjectId};
use crate::transport::StorageClient;
use crate::wire::RecordKind;

/// Stored block payload: the committed writer's timestamp followed by the
/// client value, so a fetched object carries its provenance across epochs.
fn tag_value(writer: Timestamp, value: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + value.len());
    out.extend_from_slice(&writer.to_le_bytes());
    out.extend_from_slice(value);
    out
}

fn untag_value(bytes: &[u8]) -> Result<(Timestamp, Vec<u8>)> {
    if bytes.len() < 8 {
        return Err(Error::Integrity("stored value shorter than its writer tag".into()));
    }
    let writer = Timestamp::from_le_bytes(bytes[..8].try_into().unwrap());
    Ok((writer, bytes[8..].to_vec()))
}

/// Crash-injection points, mirroring the externally-visible or persistent
/// steps of the epoch protocol and of recovery itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HookPoint {
    /// Before a path log (read batch or write phase) is appended.
    BeforePathLogWrite,
    /// Between the log append and the trusted batch-counter update.
    BeforeBatchCounterUpdate,
    /// Between the counter update and the batch's physical reads.
    BeforeBatchReads,
    /// Before the epoch's deduplicated bucket writes flush.
    BeforeWriteFlush,
    /// Before the checkpoint record is appended.
    BeforeCheckpointWrite,
    /// Between the checkpoint append and the trusted epoch-counter update.
    BeforeEpochCounterUpdate,
    /// After the epoch commits, before clients are notified.
    BeforeCommitNotify,
    /// During recovery, before replaying logged paths.
    RecoveryBeforeReplay,
    /// During recovery, before the recovery checkpoint is appended.
    RecoveryBeforeCheckpoint,
    /// During recovery, before the trusted epoch counter advances.
    RecoveryBeforeCounterUpdate,
}

pub const ALL_HOOKS: [HookPoint; 10] = [
    HookPoint::BeforePathLogWrite,
    HookPoint::BeforeBatchCounterUpdate,
    HookPoint::BeforeBatchReads,
    HookPoint::BeforeWriteFlush,
    HookPoint::BeforeCheckpointWrite,
    HookPoint::BeforeEpochCounterUpdate,
    HookPoint::BeforeCommitNotify,
    HookPoint::RecoveryBeforeReplay,
    HookPoint::RecoveryBeforeCheckpoint,
    HookPoint::RecoveryBeforeCounterUpdate,
];

/// Decides whether to crash at each hook firing.
pub trait CrashHooks: Send {
    fn check(&mut self, point: HookPoint) -> bool;
}

/// Never crashes.
pub struct NoCrashes;

impl CrashHooks for NoCrashes {
    fn check(&mut self, _: HookPoint) -> bool {
        false
    }
}

/// Crash at the n-th occurrence (0-based) of specific hook points.
#[derive(Debug, Default, Clone)]
pub struct ScheduledCrashes {
    triggers: Vec<(HookPoint, u64)>,
    counts: HashMap<HookPoint, u64>,
}

impl ScheduledCrashes {
    pub fn at(triggers: Vec<(HookPoint, u64)>) -> Self {
        ScheduledCrashes { triggers, counts: HashMap::new() }
    }

    /// `count` crash points drawn deterministically from the hook space,
    /// each at an occurrence below `max_occurrence`.
    pub fn random_triggers(seed: u64, count: usize, max_occurrence: u64) -> Vec<(HookPoint, u64)> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let hook = ALL_HOOKS[rng.gen_range(0..ALL_HOOKS.len())];
                (hook, rng.gen_range(0..max_occurrence.max(1)))
            })
            .collect()
    }
}

impl CrashHooks for ScheduledCrashes {
    fn check(&mut self, point: HookPoint) -> bool {
        let count = self.counts.entry(point).or_insert(0);
        let fire = self.triggers.iter().any(|&(p, n)| p == point && n == *count);
        *count += 1;
        fire
    }
}

/// Final decision for a transaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TxnOutcome {
    Committed,
    Aborted(AbortReason),
}

/// Immediate result of a read submission.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReadResult {
    /// Served from the version cache.
    Value(Vec<u8>),
    /// Scheduled into a read batch; delivery arrives from `tick`.
    Pending,
    NotFound,
    /// The transaction is no longer active.
    Aborted(AbortReason),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WriteResult {
    Ok,
    Aborted(AbortReason),
}

/// A resolved scheduled read. `value == None` means the transaction aborted
/// before its read batch fired.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub ts: Timestamp,
    pub key: ObjectId,
    pub value: Option<Vec<u8>>,
}

/// Externally visible record of a finished transaction, released with the
/// epoch's commit notifications.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FinishedTxn {
    pub ts: Timestamp,
    pub epoch: u64,
    pub outcome: TxnOutcome,
    pub reads: Vec<(ObjectId, Timestamp)>,
    pub writes: Vec<(ObjectId, Vec<u8>)>,
}

#[derive(Debug, Default)]
pub struct TickOutput {
    pub delivered: Vec<Delivery>,
    pub finished: Vec<FinishedTxn>,
    /// Set when this tick sealed an epoch (its id).
    pub epoch_sealed: Option<u64>,
}

/// Status answer for client queries, including after recovery.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatusView {
    Active,
    Completed,
    Outcome(TxnOutcome),
    /// The proxy crashed since; per-transaction outcomes from before the
    /// crash are not retained. Epoch fate-sharing still answers the
    /// question: query `epoch_committed` with the transaction's epoch.
    UnknownBeforeCrash,
}

#[derive(Debug, Default, Clone)]
pub struct ProxyStats {
    pub epochs_sealed: u64,
    pub batches_fired: u64,
    pub stash_high_water: usize,
    pub cache_served_reads: u64,
    pub oram_scheduled_reads: u64,
    pub reshuffles: u64,
}

pub struct Proxy {
    cfg: SystemConfig,
    keys: KeyMaterial,
    codec: RecordCodec,
    store: Arc<dyn StorageClient>,
    observer: Arc<Observer>,
    counter: TrustedCounter,
    hooks: Box<dyn CrashHooks>,
    pipeline: EpochPipeline,

    /// Epoch in progress (committed counter + 1).
    epoch: u64,
    tick_in_epoch: u64,
    global_tick: u64,
    next_batch: usize,
    next_ts: Timestamp,

    txns: BTreeMap<Timestamp, TxnRecord>,
    cache: HashMap<ObjectId, VersionChain>,
    /// Keys whose pre-epoch value has been fetched this epoch.
    fetched: BTreeSet<ObjectId>,
    /// Distinct keys scheduled per pending read batch.
    scheduled: Vec<Vec<ObjectId>>,
    scheduled_in: HashMap<ObjectId, usize>,
    waiters: HashMap<ObjectId, Vec<Timestamp>>,

    outcomes: BTreeMap<Timestamp, TxnOutcome>,
    epoch_end_counters: BTreeMap<u64, u64>,
    crashed: bool,
    pub stats: ProxyStats,
}

impl Proxy {
    /// Build the initial tree and epoch-0 checkpoint on `store`. The trusted
    /// counter must be fresh.
    pub fn init_storage(
        cfg: &SystemConfig,
        keys: &KeyMaterial,
        store: &dyn StorageClient,
        observer: &Observer,
        data: &BTreeMap<ObjectId, Vec<u8>>,
    ) -> Result<()> {
        cfg.validate()?;
        observer.set_position(0, 0, NO_BATCH);
        let tagged: BTreeMap<ObjectId, Vec<u8>> = data
            .iter()
            .map(|(&k, v)| (k, tag_value(crate::mvtso::BASE_WRITER, v)))
            .collect();
        let pipeline = EpochPipeline::init(cfg, keys.clone(), store, &tagged)?;
        let sealer = Sealer::new(keys.clone(), cfg.integrity == crate::config::IntegrityMode::Sealed);
        let codec = RecordCodec::new(cfg.clone(), keys.clone(), sealer);
        let full = Self::full_checkpoint_of(cfg, &pipeline, 1);
        store.log_append(RecordKind::FullCheckpoint, 0, codec.encode_full(0, &full)?)?;
        Ok(())
    }

    fn full_checkpoint_of(
        cfg: &SystemConfig,
        pipeline: &EpochPipeline,
        next_timestamp: Timestamp,
    ) -> FullCheckpoint {
        let machine = &pipeline.machine;
        let (versions, valid) = pipeline.mirror();
        let buckets = (0..cfg.geometry.bucket_count() as u32)
            .map(|b| {
                let (version, dummies_used, roles, perm) = machine.bucket_meta(b);
                debug_assert_eq!(version, versions[b as usize]);
                FullBucket {
                    version,
                    dummies_used,
                    roles,
                    perm,
                    server_valid: valid[b as usize].clone(),
                }
            })
            .collect();
        FullCheckpoint {
            access_count: machine.access_count(),
            evictions_done: machine.evictions_done(),
            next_timestamp,
            positions: machine
                .positions_iter()
                .map(|(k, e)| (k, e.leaf, e.remaps))
                .collect(),
            buckets,
            stash: machine
                .stash_keys()
                .map(|k| (k, pipeline.values.get(&k).cloned().unwrap_or_default()))
                .collect(),
        }
    }

    /// Boot (or recover) a proxy from keys, the trusted counter, and the
    /// storage server. This is the only construction path: a clean boot is
    /// a recovery with nothing to replay.
    pub fn recover(
        cfg: SystemConfig,
        keys: KeyMaterial,
        store: Arc<dyn StorageClient>,
        observer: Arc<Observer>,
        counter: TrustedCounter,
        mut hooks: Box<dyn CrashHooks>,
    ) -> Result<Self> {
        cfg.validate()?;
        let sealer = Sealer::new(keys.clone(), cfg.integrity == crate::config::IntegrityMode::Sealed);
        let codec = RecordCodec::new(cfg.clone(), keys.clone(), sealer.clone());
        let (committed_epoch, claimed_batches) = counter.snapshot();

        // Restore the newest full checkpoint at or below the committed
        // epoch, then roll deltas forward.
        let mut restored: Option<(u64, FullCheckpoint)> = None;
        for e in (0..=committed_epoch).rev() {
            if let Some(bytes) = store.log_read(RecordKind::FullCheckpoint, e)? {
                restored = Some((e, codec.decode_full(e, &bytes)?));
                break;
            }
        }
        let (full_epoch, mut state) = restored.ok_or_else(|| {
            Error::Integrity(format!("no full checkpoint at or below epoch {committed_epoch}"))
        })?;
        for e in full_epoch + 1..=committed_epoch {
            let bytes = store.log_read(RecordKind::DeltaCheckpoint, e)?.ok_or_else(|| {
                Error::Integrity(format!("checkpoint for epoch {e} withheld by storage"))
            })?;
            state.apply_delta(&codec.decode_delta(e, &bytes)?);
        }

        let machine = crate::oram::OramMachine::from_checkpoint(
            cfg.geometry,
            keys.clone(),
            state.access_count,
            state.evictions_done,
            state.positions.iter().copied(),
            state
                .buckets
                .iter()
                .map(|b| (b.version, b.dummies_used, b.roles.clone(), b.perm.clone()))
                .collect(),
            state.stash.iter().map(|(k, _)| *k),
        )?;
        let mirror_versions: Vec<u64> = state.buckets.iter().map(|b| b.version).collect();
        let mirror_valid: Vec<Vec<bool>> =
            state.buckets.iter().map(|b| b.server_valid.clone()).collect();
        let values: HashMap<ObjectId, Vec<u8>> = state.stash.iter().cloned().collect();
        let mut pipeline = EpochPipeline::from_parts(
            &cfg,
            keys.clone(),
            sealer,
            machine,
            values,
            Some((mirror_versions, mirror_valid)),
        );

        let mut epoch_end_counters = BTreeMap::new();
        epoch_end_counters.insert(committed_epoch, state.access_count);

        if claimed_batches > 0 {
            // A crashed epoch is in flight: discard its partial writes and
            // deterministically repeat its logged reads.
            observer.set_position(0, committed_epoch + 1, NO_BATCH);
            store.rollback_to(state.access_count)?;
            if hooks.check(HookPoint::RecoveryBeforeReplay) {
                return Err(Error::CrashInjected(HookPoint::RecoveryBeforeReplay));
            }
            for batch in 0..claimed_batches {
                observer.set_position(batch as u64, committed_epoch + 1, batch);
                let count = batch_counter(&cfg, committed_epoch, batch);
                let bytes = store.log_read(RecordKind::PathLog, count)?.ok_or_else(|| {
                    Error::Integrity(format!("path log {count} withheld by storage"))
                })?;
                let record = codec.decode_path_log(count, &bytes)?;
                Self::replay_log(&cfg, &mut pipeline, store.as_ref(), &observer, &record)?;
            }
            if hooks.check(HookPoint::RecoveryBeforeCheckpoint) {
                return Err(Error::CrashInjected(HookPoint::RecoveryBeforeCheckpoint));
            }
            // The recovery epoch commits with no transactions of its own.
            pipeline.machine.take_dirty();
            let full = Self::full_checkpoint_of(&cfg, &pipeline, state.next_timestamp);
            let recovery_epoch = committed_epoch + 1;
            store.log_append(
                RecordKind::FullCheckpoint,
                recovery_epoch,
                codec.encode_full(recovery_epoch, &full)?,
            )?;
            if hooks.check(HookPoint::RecoveryBeforeCounterUpdate) {
                return Err(Error::CrashInjected(HookPoint::RecoveryBeforeCounterUpdate));
            }
            counter.advance_epoch()?;
            epoch_end_counters.insert(recovery_epoch, state.access_count);
        }

        let (committed_epoch, _) = counter.snapshot();
        let epoch = committed_epoch + 1;
        let read_batches = cfg.epoch.read_batches;
        let stash_high_water = pipeline.machine.stash_len();
        let next_ts = state.next_timestamp.max(1);
        Ok(Proxy {
            cfg,
            keys,
            codec,
            store,
            observer,
            counter,
            hooks,
            pipeline,
            epoch,
            tick_in_epoch: 0,
            global_tick: 0,
            next_batch: 0,
            next_ts,
            txns: BTreeMap::new(),
            cache: HashMap::new(),
            fetched: BTreeSet::new(),
            scheduled: vec![Vec::new(); read_batches],
            scheduled_in: HashMap::new(),
            waiters: HashMap::new(),
            outcomes: BTreeMap::new(),
            epoch_end_counters,
            crashed: false,
            stats: ProxyStats { stash_high_water, ..ProxyStats::default() },
        })
    }

    fn replay_log(
        cfg: &SystemConfig,
        pipeline: &mut EpochPipeline,
        store: &dyn StorageClient,
        observer: &Observer,
        record: &PathLogRecord,
    ) -> Result<()> {
        let mut replay_one = |bucket: u32, slot: u16, remap: bool| -> Result<()> {
            let (versions, valid) = pipeline.mirror_mut();
            let version = versions[bucket as usize];
            valid[bucket as usize][slot as usize] = false;
            let (_, envelope) = store.read_slot(bucket, slot)?;
            observer.record(EventKind::SlotRead, Origin::Replay, bucket, slot, version, 0, envelope.len(), true);
            let id = crate::crypto::FreshnessId::TreeSlot { bucket, slot, version };
            let plain = pipeline.sealer().open(&envelope, &id)?;
            let decoded = crate::crypto::decode_block(&plain)?;
            let pulled = pipeline.machine.replay_read_effects(bucket, slot, remap)?;
            match (pulled, decoded) {
                (Some(expect), Some((key, value))) if key == expect => {
                    pipeline.values.insert(key, value);
                }
                (Some(expect), other) => {
                    return Err(Error::Integrity(format!(
                        "replayed slot ({bucket}, {slot}) holds {:?}, expected object {expect}",
                        other.map(|(k, _)| k)
                    )));
                }
                (None, _) => {}
            }
            Ok(())
        };
        for path in &record.paths {
            for (depth, &slot) in path.slots.iter().enumerate() {
                if slot == SLOT_SENTINEL {
                    continue;
                }
                let bucket = cfg.geometry.path_bucket(path.leaf, depth as u32);
                replay_one(bucket, slot, true)?;
            }
        }
        for &(bucket, slot) in &record.extras {
            replay_one(bucket, slot, false)?;
        }
        Ok(())
    }

    fn hook(&mut self, point: HookPoint) -> Result<()> {
        if self.hooks.check(point) {
            self.crashed = true;
            return Err(Error::CrashInjected(point));
        }
        Ok(())
    }

    fn ensure_live(&self) -> Result<()> {
        if self.crashed {
            return Err(Error::Internal("proxy has crashed; recover a new one".into()));
        }
        Ok(())
    }

    pub fn observer(&self) -> &Arc<Observer> {
        &self.observer
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn committed_epoch(&self) -> u64 {
        self.counter.snapshot().0
    }

    /// Ticks remaining in the current epoch, for schedulers.
    pub fn epoch_length(&self) -> u64 {
        (self.cfg.epoch.read_batches as u64 + 1) * self.cfg.epoch.batch_interval
    }

    // -----------------------------------------------------------------------
    // Client operations
    // -----------------------------------------------------------------------

    pub fn begin(&mut self) -> Result<Timestamp> {
        self.ensure_live()?;
        let ts = self.next_ts;
        self.next_ts += 1;
        self.txns.insert(ts, TxnRecord::new(ts, self.epoch));
        Ok(ts)
    }

    pub fn read(&mut self, ts: Timestamp, key: ObjectId) -> Result<ReadResult> {
        self.ensure_live()?;
        if let Some(t) = self.txns.get(&ts) {
            if t.status != TxnStatus::Active {
                return Ok(ReadResult::Aborted(
                    t.abort_reason.unwrap_or(AbortReason::Voluntary),
                ));
            }
        } else {
            return Err(Error::Internal(format!("unknown transaction {ts}")));
        }

        // Serve from the version cache when any visible version exists.
        if let Some(chain) = self.cache.get_mut(&key) {
            if let Some((value, writer)) = chain.read_for(ts) {
                let value = value.to_vec();
                let txn = self.txns.get_mut(&ts).unwrap();
                txn.reads.push((key, writer));
                if writer != BASE_WRITER && self.txns.contains_key(&writer) {
                    self.txns.get_mut(&ts).unwrap().deps.insert(writer);
                }
                self.stats.cache_served_reads += 1;
                return Ok(ReadResult::Value(value));
            }
        }

        if !self.pipeline.machine.contains(key) {
            return Ok(ReadResult::NotFound);
        }

        // Schedule an ORAM fetch, deduplicated across the epoch's batches.
        if self.scheduled_in.contains_key(&key) {
            self.waiters.entry(key).or_default().push(ts);
            return Ok(ReadResult::Pending);
        }
        let slot_limit = self.cfg.epoch.read_batch_size;
        let batch = (self.next_batch..self.cfg.epoch.read_batches)
            .find(|&b| self.scheduled[b].len() < slot_limit);
        match batch {
            Some(b) => {
                self.scheduled[b].push(key);
                self.scheduled_in.insert(key, b);
                self.waiters.entry(key).or_default().push(ts);
                self.stats.oram_scheduled_reads += 1;
                Ok(ReadResult::Pending)
            }
            None => {
                self.abort_txn(ts, AbortReason::BatchesFull);
                Ok(ReadResult::Aborted(AbortReason::BatchesFull))
            }
        }
    }

    pub fn write(&mut self, ts: Timestamp, key: ObjectId, value: &[u8]) -> Result<WriteResult> {
        self.ensure_live()?;
        if let Some(t) = self.txns.get(&ts) {
            if t.status != TxnStatus::Active {
                return Ok(WriteResult::Aborted(
                    t.abort_reason.unwrap_or(AbortReason::Voluntary),
                ));
            }
        } else {
            return Err(Error::Internal(format!("unknown transaction {ts}")));
        }
        if value.len() + crate::crypto::BLOCK_HEADER_LEN > self.cfg.block_size {
            return Err(Error::Config(format!(
                "value of {} bytes exceeds block capacity {}",
                value.len(),
                self.cfg.block_size - crate::crypto::BLOCK_HEADER_LEN
            )));
        }
        if !self.pipeline.machine.contains(key)
            && !self.cache.contains_key(&key)
            && self.pipeline.machine.positions_len() as u64 >= self.cfg.geometry.capacity
        {
            self.abort_txn(ts, AbortReason::WriteConflict);
            return Ok(WriteResult::Aborted(AbortReason::WriteConflict));
        }
        let chain = self.cache.entry(key).or_default();
        match chain.write(ts, value.to_vec()) {
            mvtso::WriteOutcome::Ok => {
                self.txns.get_mut(&ts).unwrap().writes.insert(key);
                Ok(WriteResult::Ok)
            }
            mvtso::WriteOutcome::Conflict { .. } => {
                self.abort_txn(ts, AbortReason::WriteConflict);
                Ok(WriteResult::Aborted(AbortReason::WriteConflict))
            }
        }
    }

    /// Request commit; the decision arrives when the epoch seals. A commit
    /// racing an abort (or the epoch boundary) is ignored; the notification
    /// carries the real outcome.
    pub fn complete(&mut self, ts: Timestamp) -> Result<()> {
        self.ensure_live()?;
        if let Some(t) = self.txns.get_mut(&ts) {
            if t.status == TxnStatus::Active {
                t.status = TxnStatus::Completed;
            }
        }
        Ok(())
    }

    pub fn abort(&mut self, ts: Timestamp) -> Result<()> {
        self.ensure_live()?;
        if self.txns.get(&ts).map(|t| t.status == TxnStatus::Active).unwrap_or(false) {
            self.abort_txn(ts, AbortReason::Voluntary);
        }
        Ok(())
    }

    pub fn txn_status(&self, ts: Timestamp) -> StatusView {
        if let Some(t) = self.txns.get(&ts) {
            return match t.status {
                TxnStatus::Active => StatusView::Active,
                TxnStatus::Completed => StatusView::Completed,
                TxnStatus::Aborted => StatusView::Outcome(TxnOutcome::Aborted(
                    t.abort_reason.unwrap_or(AbortReason::Voluntary),
                )),
                TxnStatus::Committed => StatusView::Outcome(TxnOutcome::Committed),
            };
        }
        match self.outcomes.get(&ts) {
            Some(&outcome) => StatusView::Outcome(outcome),
            None => StatusView::UnknownBeforeCrash,
        }
    }

    /// Whether every transaction of `epoch` that completed was made durable.
    pub fn epoch_committed(&self, epoch: u64) -> bool {
        epoch <= self.counter.snapshot().0
    }

    fn abort_txn(&mut self, ts: Timestamp, reason: AbortReason) {
        if let Some(t) = self.txns.get_mut(&ts) {
            if t.status != TxnStatus::Aborted {
                t.status = TxnStatus::Aborted;
                t.abort_reason = Some(reason);
            }
        }
        mvtso::cascade_aborts(&mut self.txns);
        self.excise_aborted();
    }

    fn excise_aborted(&mut self) {
        for t in self.txns.values() {
            if t.status == TxnStatus::Aborted {
                for &key in &t.writes {
                    if let Some(chain) = self.cache.get_mut(&key) {
                        chain.remove_writer(t.ts);
                    }
                }
            }
        }
    }

    // -----------------------------------------------------------------------
    // Time
    // -----------------------------------------------------------------------

    /// Advance logical time by one tick, firing read batches and the epoch
    /// seal on schedule. Any failure (integrity alarm, storage outage,
    /// injected crash) abandons the epoch in progress: the proxy must be
    /// dropped and recovered.
    pub fn tick(&mut self) -> Result<TickOutput> {
        self.ensure_live()?;
        self.tick_in_epoch += 1;
        self.global_tick += 1;
        let interval = self.cfg.epoch.batch_interval;
        let mut out = TickOutput::default();
        let fired = if self.next_batch < self.cfg.epoch.read_batches
            && self.tick_in_epoch == (self.next_batch as u64 + 1) * interval
        {
            let batch = self.next_batch;
            self.fire_batch(batch, &mut out)
        } else if self.tick_in_epoch == (self.cfg.epoch.read_batches as u64 + 1) * interval {
            self.finalize_epoch(&mut out)
        } else {
            Ok(())
        };
        if let Err(e) = fired {
            self.crashed = true;
            return Err(e);
        }
        Ok(out)
    }

    fn fire_batch(&mut self, batch: usize, out: &mut TickOutput) -> Result<()> {
        self.observer.set_position(self.global_tick, self.epoch, batch as u32);
        self.stats.batches_fired += 1;
        self.next_batch = batch + 1;

        // Shape the batch: scheduled keys whose base arrived meanwhile turn
        // into dummies, and empty slots are padded with dummy path reads.
        let mut slots: Vec<LogicalSlot> = Vec::with_capacity(self.cfg.epoch.read_batch_size);
        let mut leaves: Vec<u64> = Vec::with_capacity(self.cfg.epoch.read_batch_size);
        let keys = std::mem::take(&mut self.scheduled[batch]);
        for &key in &keys {
            if self.fetched.contains(&key) {
                let leaf = self.derive_dummy_leaf(batch as u32, slots.len() as u32);
                slots.push(LogicalSlot::DummyRead { leaf });
                leaves.push(leaf);
            } else {
                let entry = self
                    .pipeline
                    .machine
                    .position(key)
                    .ok_or_else(|| Error::Internal(format!("scheduled key {key} unmapped")))?;
                slots.push(LogicalSlot::Read(key));
                leaves.push(entry.leaf);
            }
        }
        while slots.len() < self.cfg.epoch.read_batch_size {
            let leaf = self.derive_dummy_leaf(batch as u32, slots.len() as u32);
            slots.push(LogicalSlot::DummyRead { leaf });
            leaves.push(leaf);
        }

        let planned = self.pipeline.plan_batch(&slots, &self.observer)?;

        // Reconstruct the per-path physical slots for the log: planned
        // access reads arrive in path order; buffer-served depths get a
        // sentinel.
        let path_len = self.cfg.geometry.levels + 1;
        let mut access = planned.iter().filter(|r| r.origin == Origin::Access).peekable();
        let mut paths = Vec::with_capacity(leaves.len());
        for &leaf in &leaves {
            let mut per_depth = Vec::with_capacity(path_len as usize);
            for depth in 0..path_len {
                let bucket = self.cfg.geometry.path_bucket(leaf, depth);
                if access.peek().map(|r| r.bucket == bucket).unwrap_or(false) {
                    per_depth.push(access.next().unwrap().slot);
                } else {
                    per_depth.push(SLOT_SENTINEL);
                }
            }
            paths.push(LoggedPath { leaf, slots: per_depth });
        }
        if access.next().is_some() {
            return Err(Error::Internal("unclaimed access reads in batch plan".into()));
        }
        let extras: Vec<(u32, u16)> = planned
            .iter()
            .filter(|r| matches!(r.origin, Origin::Evict | Origin::Reshuffle))
            .map(|r| (r.bucket, r.slot))
            .collect();
        // Execute in log order (access paths, then eviction/reshuffle
        // reads) so a post-crash replay of the log repeats the adversary's
        // view verbatim. All reads in a batch target distinct slots, so the
        // reorder is free.
        let mut ordered: Vec<crate::exec::PlannedRead> = Vec::with_capacity(planned.len());
        ordered.extend(planned.iter().filter(|r| r.origin == Origin::Access).copied());
        ordered.extend(
            planned.iter().filter(|r| matches!(r.origin, Origin::Evict | Origin::Reshuffle)).copied(),
        );
        let planned = ordered;

        // Durable intent, counter, then execution.
        let record = PathLogRecord { epoch: self.epoch, batch: batch as u32, paths, extras };
        let count = batch_counter(&self.cfg, self.epoch - 1, batch as u32);
        self.hook(HookPoint::BeforePathLogWrite)?;
        let bytes = self.codec.encode_path_log(count, &record)?;
        self.store.log_append(RecordKind::PathLog, count, bytes)?;
        self.hook(HookPoint::BeforeBatchCounterUpdate)?;
        self.counter.claim_batch(batch as u32 + 1)?;
        self.observer.record(
            EventKind::CounterUpdate,
            Origin::None,
            0,
            0,
            batch as u64 + 1,
            0,
            0,
            true,
        );
        self.hook(HookPoint::BeforeBatchReads)?;
        self.pipeline.execute_reads(self.store.as_ref(), &planned, self.cfg.workers)?;
        self.stats.stash_high_water =
            self.stats.stash_high_water.max(self.pipeline.stash_high_water);
        self.stats.reshuffles = self.pipeline.reshuffles;

        // Install fetched bases and serve waiters.
        for &key in &keys {
            self.scheduled_in.remove(&key);
            if !self.fetched.contains(&key) {
                let stored = self.pipeline.values.get(&key).cloned().ok_or_else(|| {
                    Error::Internal(format!("fetched key {key} missing from value table"))
                })?;
                let (writer, value) = untag_value(&stored)?;
                self.cache.entry(key).or_default().install_base(writer, value);
                self.fetched.insert(key);
            }
            for ts in self.waiters.remove(&key).unwrap_or_default() {
                let active = self
                    .txns
                    .get(&ts)
                    .map(|t| t.status == TxnStatus::Active)
                    .unwrap_or(false);
                if !active {
                    out.delivered.push(Delivery { ts, key, value: None });
                    continue;
                }
                let chain = self.cache.get_mut(&key).expect("base just installed");
                let (value, writer) = chain
                    .read_for(ts)
                    .map(|(v, w)| (v.to_vec(), w))
                    .ok_or_else(|| Error::Internal("base version invisible to waiter".into()))?;
                let txn = self.txns.get_mut(&ts).unwrap();
                txn.reads.push((key, writer));
                if writer != BASE_WRITER && self.txns.contains_key(&writer) {
                    self.txns.get_mut(&ts).unwrap().deps.insert(writer);
                }
                out.delivered.push(Delivery { ts, key, value: Some(value) });
            }
        }
        Ok(())
    }

    fn derive_dummy_leaf(&self, batch: u32, slot: u32) -> u64 {
        self.keys.derive_leaf(
            Derivation::DummyPath { epoch: self.epoch, batch, slot },
            self.cfg.geometry.leaf_count(),
        )
    }

    fn finalize_epoch(&mut self, out: &mut TickOutput) -> Result<()> {
        self.observer.set_position(self.global_tick, self.epoch, NO_BATCH);

        // Resolve transaction fates, then fit the write batch.
        mvtso::resolve_epoch(&mut self.txns);
        self.excise_aborted();
        let finals = loop {
            let committed: BTreeSet<Timestamp> = self
                .txns
                .values()
                .filter(|t| t.status == TxnStatus::Committed)
                .map(|t| t.ts)
                .collect();
            let mut finals: BTreeMap<ObjectId, (Timestamp, Vec<u8>)> = BTreeMap::new();
            for (&key, chain) in &self.cache {
                if let Some(v) = chain.latest_committed(&committed) {
                    finals.insert(key, (v.writer, v.value.clone()));
                }
            }
            if finals.len() <= self.cfg.epoch.write_batch_size {
                break finals;
            }
            // Too many dirty keys: abort the owners of the lowest-timestamped
            // final versions until the batch fits.
            let mut by_ts: Vec<(Timestamp, ObjectId)> =
                finals.iter().map(|(&k, &(ts, _))| (ts, k)).collect();
            by_ts.sort_unstable();
            let excess = finals.len() - self.cfg.epoch.write_batch_size;
            let victims: BTreeSet<Timestamp> =
                by_ts.iter().take(excess).map(|&(ts, _)| ts).collect();
            for ts in victims {
                self.abort_txn(ts, AbortReason::WriteBatchOverflow);
            }
        };

        // Write batch: one dummiless write per surviving dirty key, padded.
        // Values are tagged with their committed writer so later epochs can
        // attribute reads exactly.
        let mut write_slots: Vec<(LogicalSlot, Option<Vec<u8>>)> = finals
            .iter()
            .map(|(&key, (writer, value))| {
                (LogicalSlot::DummilessWrite(key), Some(tag_value(*writer, value)))
            })
            .collect();
        while write_slots.len() < self.cfg.epoch.write_batch_size {
            write_slots.push((LogicalSlot::DummyWrite, None));
        }

        // Pre-log the write phase's physical reads by planning on a clone.
        let mut preview = self.pipeline.clone();
        let silent = Observer::disabled();
        let mut extras: Vec<(u32, u16)> = Vec::new();
        for (slot, _) in &write_slots {
            let planned = preview.plan_batch(std::slice::from_ref(slot), &silent)?;
            extras.extend(planned.iter().map(|r| (r.bucket, r.slot)));
        }
        drop(preview);
        let record = PathLogRecord {
            epoch: self.epoch,
            batch: self.cfg.epoch.read_batches as u32,
            paths: Vec::new(),
            extras: extras.clone(),
        };
        let count =
            batch_counter(&self.cfg, self.epoch - 1, self.cfg.epoch.read_batches as u32);
        self.hook(HookPoint::BeforePathLogWrite)?;
        let bytes = self.codec.encode_path_log(count, &record)?;
        self.store.log_append(RecordKind::PathLog, count, bytes)?;
        self.hook(HookPoint::BeforeBatchCounterUpdate)?;
        self.counter.claim_batch(self.cfg.epoch.read_batches as u32 + 1)?;
        self.observer.record(
            EventKind::CounterUpdate,
            Origin::None,
            0,
            0,
            self.cfg.epoch.read_batches as u64 + 1,
            0,
            0,
            true,
        );
        self.hook(HookPoint::BeforeBatchReads)?;

        // Execute the write phase for real, one slot per plan group.
        let mut executed: Vec<(u32, u16)> = Vec::new();
        for (slot, value) in &write_slots {
            if let (LogicalSlot::DummilessWrite(key), Some(v)) = (slot, value) {
                self.pipeline.values.insert(*key, v.clone());
            }
            let planned = self.pipeline.plan_batch(std::slice::from_ref(slot), &self.observer)?;
            executed.extend(planned.iter().map(|r| (r.bucket, r.slot)));
            self.pipeline.execute_reads(self.store.as_ref(), &planned, self.cfg.workers)?;
        }
        if executed != extras {
            return Err(Error::Internal("write-phase plan diverged from its log".into()));
        }

        self.hook(HookPoint::BeforeWriteFlush)?;
        let flush_tag = self.pipeline.machine.access_count();
        let summary =
            self.pipeline.flush_epoch(self.store.as_ref(), flush_tag, self.cfg.workers)?;
        self.stats.stash_high_water =
            self.stats.stash_high_water.max(self.pipeline.machine.stash_len());

        // Checkpoint: delta normally, full on the configured cadence.
        let (dirty_positions, dirty_buckets) = self.pipeline.machine.take_dirty();
        let write_full = self.epoch.is_multiple_of(self.cfg.full_checkpoint_every);
        self.hook(HookPoint::BeforeCheckpointWrite)?;
        if write_full {
            let full = Self::full_checkpoint_of(&self.cfg, &self.pipeline, self.next_ts);
            let bytes = self.codec.encode_full(self.epoch, &full)?;
            self.store.log_append(RecordKind::FullCheckpoint, self.epoch, bytes)?;
        } else {
            let machine = &self.pipeline.machine;
            let flushed_set: BTreeSet<u32> = summary.flushed.iter().map(|&(b, _)| b).collect();
            let delta = DeltaCheckpoint {
                access_count: machine.access_count(),
                evictions_done: machine.evictions_done(),
                next_timestamp: self.next_ts,
                invalidated: summary.invalidated.clone(),
                positions: dirty_positions
                    .iter()
                    .map(|&k| {
                        let e = machine.position(k).expect("dirty key is mapped");
                        (k, e.leaf, e.remaps)
                    })
                    .collect(),
                rewritten: summary
                    .flushed
                    .iter()
                    .map(|&(b, v)| {
                        let (version, dummies_used, roles, perm) = machine.bucket_meta(b);
                        debug_assert_eq!(version, v);
                        RewrittenBucket { bucket: b, version, dummies_used, roles, perm }
                    })
                    .collect(),
                cursors: dirty_buckets
                    .iter()
                    .filter(|b| !flushed_set.contains(b))
                    .map(|&b| {
                        let (_, dummies_used, roles, _) = machine.bucket_meta(b);
                        CursorUpdate { bucket: b, dummies_used, roles }
                    })
                    .collect(),
                stash: machine
                    .stash_keys()
                    .map(|k| (k, self.pipeline.values.get(&k).cloned().unwrap_or_default()))
                    .collect(),
            };
            let bytes = self.codec.encode_delta(self.epoch, &delta)?;
            self.store.log_append(RecordKind::DeltaCheckpoint, self.epoch, bytes)?;
        }
        self.hook(HookPoint::BeforeEpochCounterUpdate)?;
        self.counter.advance_epoch()?;
        self.observer.record(EventKind::CounterUpdate, Origin::None, 0, 0, self.epoch, 0, 0, true);
        self.epoch_end_counters.insert(self.epoch, self.pipeline.machine.access_count());
        self.hook(HookPoint::BeforeCommitNotify)?;

        // Release outcomes only now that the epoch is durable.
        let sealed = std::mem::take(&mut self.txns);
        for (ts, txn) in sealed {
            let outcome = match txn.status {
                TxnStatus::Committed => TxnOutcome::Committed,
                _ => TxnOutcome::Aborted(txn.abort_reason.unwrap_or(AbortReason::Unfinished)),
            };
            self.outcomes.insert(ts, outcome);
            let writes = if outcome == TxnOutcome::Committed {
                txn.writes
                    .iter()
                    .filter_map(|&key| {
                        self.cache.get(&key).and_then(|chain| {
                            chain
                                .versions()
                                .iter()
                                .find(|v| v.writer == ts)
                                .map(|v| (key, v.value.clone()))
                        })
                    })
                    .collect()
            } else {
                Vec::new()
            };
            out.finished.push(FinishedTxn {
                ts,
                epoch: self.epoch,
                outcome,
                reads: txn.reads.clone(),
                writes,
            });
        }
        out.epoch_sealed = Some(self.epoch);
        self.stats.epochs_sealed += 1;

        // The cache is completely flushed at the epoch boundary.
        self.cache.clear();
        self.fetched.clear();
        self.scheduled = vec![Vec::new(); self.cfg.epoch.read_batches];
        self.scheduled_in.clear();
        self.waiters.clear();
        self.epoch += 1;
        self.tick_in_epoch = 0;
        self.next_batch = 0;

        // Opportunistic shadow-paging GC after full checkpoints.
        if write_full {
            let horizon_epoch = (self.epoch - 1)
                .saturating_sub(self.cfg.gc_windows * self.cfg.full_checkpoint_every);
            if let Some(&tag) = self.epoch_end_counters.get(&horizon_epoch) {
                if horizon_epoch > 0 {
                    self.store.gc(tag)?;
                }
            }
        }
        Ok(())
    }
}
