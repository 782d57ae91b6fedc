//! Shared harnesses: the batched-vs-sequential comparison under simulated
//! storage latency, and the crash-sweep case verifier used by the CLI and
//! the acceptance suite.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::config::{EpochShape, IntegrityMode, SystemConfig, TreeGeometry};
use crate::crypto::{Derivation, KeyMaterial};
use crate::durability::{batch_counter, RecordCodec, SLOT_SENTINEL};
use crate::error::{Error, Result};
use crate::exec::EpochPipeline;
use crate::observer::{EventKind, Observer, TraceEvent};
use crate::oram::{LogicalSlot, ObjectId, SequentialOram};
use crate::proxy::{HookPoint, Proxy, ScheduledCrashes, TickOutput, TxnOutcome};
use crate::storage::StorageServer;
use crate::transport::{InProcess, Latency};
use crate::wire::RecordKind;
use crate::workload::{initial_value, SharedCrashes, TestBed};

/// Smallest write-batch size that aligns the epoch with the eviction period.
pub fn align_write_batch(cfg: &SystemConfig) -> Result<usize> {
    let period = cfg.geometry.evict_period as usize;
    let reads = cfg.epoch.read_batches * cfg.epoch.read_batch_size;
    let pad = (period - reads % period) % period;
    Ok(if pad == 0 { period } else { pad })
}

pub struct BenchResult {
    pub sequential_ms: u128,
    pub parallel_ms: u128,
    pub oracle_root_writes: usize,
    pub batched_root_writes: usize,
}

impl BenchResult {
    pub fn speedup(&self) -> f64 {
        self.sequential_ms as f64 / (self.parallel_ms.max(1)) as f64
    }
}

/// Run one epoch's worth of identical logical slots both ways against
/// latency-injected storage: sequentially (one request at a time, immediate
/// eviction writes) and batched (deduplicated, `workers` in-flight
/// requests). Also counts root-bucket writes per epoch for the dedup check.
pub fn parallel_vs_sequential(
    cfg: &SystemConfig,
    seed: u64,
    latency_ms: u64,
    workers: usize,
) -> Result<BenchResult> {
    cfg.validate()?;
    let keys = KeyMaterial::from_seed(seed);
    let n = cfg.geometry.capacity.min(cfg.epoch.read_batch_size as u64 * 2).max(4);
    let data: BTreeMap<ObjectId, Vec<u8>> = (0..n).map(|k| (k, initial_value(k))).collect();
    let delay = Duration::from_millis(latency_ms);

    // One epoch: R read batches of distinct keys plus an aligned write batch.
    let mut batches: Vec<Vec<LogicalSlot>> = Vec::new();
    for b in 0..cfg.epoch.read_batches {
        let batch: Vec<LogicalSlot> = (0..cfg.epoch.read_batch_size)
            .map(|i| {
                let key = ((b * cfg.epoch.read_batch_size + i) as u64) % n;
                if (i + b) % 3 == 2 {
                    let leaf = keys.derive_leaf(
                        Derivation::DummyPath { epoch: 1, batch: b as u32, slot: i as u32 },
                        cfg.geometry.leaf_count(),
                    );
                    LogicalSlot::DummyRead { leaf }
                } else {
                    LogicalSlot::Read(key)
                }
            })
            .collect();
        batches.push(batch);
    }
    let writes: Vec<(LogicalSlot, Option<Vec<u8>>)> = (0..cfg.epoch.write_batch_size)
        .map(|i| {
            let key = i as u64 % n;
            (LogicalSlot::DummilessWrite(key), Some(format!("bench-{i}").into_bytes()))
        })
        .collect();

    // Sequential reference: one blocking request at a time through the
    // latency transport, immediate eviction writes.
    let seq_observer = Arc::new(Observer::new());
    let seq_server = Arc::new(StorageServer::new(seq_observer.clone()));
    let mut sequential = SequentialOram::init(
        cfg,
        keys.clone(),
        Latency::new(InProcess(seq_server.clone()), delay),
        seq_observer.clone(),
        &data,
    )?;
    seq_observer.set_position(1, 1, 0);
    let started = Instant::now();
    for batch in &batches {
        for slot in batch {
            sequential.run_slot(slot, None)?;
        }
    }
    for (slot, value) in &writes {
        sequential.run_slot(slot, value.as_deref())?;
    }
    let sequential_ms = started.elapsed().as_millis();
    let oracle_root_writes = seq_observer
        .events()
        .iter()
        .filter(|e| !e.local && e.kind == EventKind::BucketWrite && e.bucket == 0 && e.epoch == 1)
        .count();

    // Batched execution over the same slots.
    let par_observer = Arc::new(Observer::new());
    let par_server = Arc::new(StorageServer::new(par_observer.clone()));
    let mut pipeline =
        EpochPipeline::init(cfg, keys.clone(), &InProcess(par_server.clone()), &data)?;
    let latency_store = Latency::new(InProcess(par_server.clone()), delay);
    par_observer.set_position(1, 1, 0);
    let started = Instant::now();
    for batch in &batches {
        let planned = pipeline.plan_batch(batch, &par_observer)?;
        pipeline.execute_reads(&latency_store, &planned, workers)?;
    }
    for (slot, value) in &writes {
        if let (LogicalSlot::DummilessWrite(k), Some(v)) = (slot, value) {
            pipeline.values.insert(*k, v.clone());
        }
        let planned = pipeline.plan_batch(std::slice::from_ref(slot), &par_observer)?;
        pipeline.execute_reads(&latency_store, &planned, workers)?;
    }
    let tag = pipeline.machine.access_count();
    let summary = pipeline.flush_epoch(&latency_store, tag, workers)?;
    let parallel_ms = started.elapsed().as_millis();
    let batched_root_writes = summary.flushed.iter().filter(|&&(b, _)| b == 0).count();

    Ok(BenchResult { sequential_ms, parallel_ms, oracle_root_writes, batched_root_writes })
}

/// The small configuration used for exhaustive crash sweeps.
pub fn sweep_config() -> SystemConfig {
    SystemConfig {
        geometry: TreeGeometry {
            levels: 4,
            real_slots: 3,
            dummy_slots: 6,
            evict_period: 2,
            capacity: 24,
        },
        epoch: EpochShape {
            read_batches: 3,
            read_batch_size: 8,
            write_batch_size: 8,
            batch_interval: 1,
        },
        block_size: 64,
        stash_bound: 96,
        full_checkpoint_every: 4,
        gc_windows: 2,
        workers: 1,
        integrity: IntegrityMode::Sealed,
    }
}

/// How many times `hook` fires per swept run of `epochs` epochs. Recovery
/// hooks get one case per epoch (a primary crash is injected to reach
/// them).
pub fn hook_occurrences(cfg: &SystemConfig, hook: HookPoint, epochs: u64) -> u64 {
    let per_epoch = match hook {
        HookPoint::BeforePathLogWrite
        | HookPoint::BeforeBatchCounterUpdate
        | HookPoint::BeforeBatchReads => cfg.epoch.read_batches as u64 + 1,
        HookPoint::BeforeWriteFlush
        | HookPoint::BeforeCheckpointWrite
        | HookPoint::BeforeEpochCounterUpdate
        | HookPoint::BeforeCommitNotify => 1,
        HookPoint::RecoveryBeforeReplay
        | HookPoint::RecoveryBeforeCheckpoint
        | HookPoint::RecoveryBeforeCounterUpdate => return epochs,
    };
    per_epoch * epochs
}

#[derive(Debug, Default)]
pub struct CrashVerdict {
    pub crashed: bool,
    pub recoveries: usize,
    /// Every write committed before the crash reads back correctly.
    pub durable_ok: bool,
    /// No crashed-epoch write is visible after recovery.
    pub no_leak_ok: bool,
    /// Recovery re-issued exactly the logged reads, in order, and the
    /// pre-crash reads form a prefix of the replay.
    pub replay_ok: bool,
    /// Second recovery from the final state converges to the same tree.
    pub converge_ok: bool,
    pub committed_keys: usize,
    pub replayed_reads: usize,
}

impl CrashVerdict {
    pub fn ok(&self) -> bool {
        self.durable_ok && self.no_leak_ok && self.replay_ok && self.converge_ok
    }

    pub fn summary(&self) -> String {
        format!(
            "crashed={} recoveries={} durable={} no_leak={} replay={} converge={} committed_keys={} replayed={}",
            self.crashed,
            self.recoveries,
            self.durable_ok,
            self.no_leak_ok,
            self.replay_ok,
            self.converge_ok,
            self.committed_keys,
            self.replayed_reads
        )
    }
}

struct SweepDriver {
    bed: TestBed,
    crashes: SharedCrashes,
    proxy: Proxy,
    /// Expected committed value per key.
    expected: BTreeMap<ObjectId, Vec<u8>>,
    /// Writes of epochs whose fate is not yet durable, keyed by epoch.
    pending: BTreeMap<u64, Vec<(ObjectId, Vec<u8>)>>,
    recoveries: usize,
    crashed: bool,
}

impl SweepDriver {
    fn new(cfg: &SystemConfig, seed: u64, crashes: SharedCrashes) -> Result<Self> {
        let preload = cfg.geometry.capacity;
        let bed = TestBed::in_memory(cfg.clone(), seed, preload)?;
        let expected: BTreeMap<ObjectId, Vec<u8>> =
            (0..preload).map(|k| (k, initial_value(k))).collect();
        let proxy = bed.boot(Box::new(crashes.clone()))?;
        Ok(SweepDriver {
            bed,
            crashes,
            proxy,
            expected,
            pending: BTreeMap::new(),
            recoveries: 0,
            crashed: false,
        })
    }

    fn settle(&mut self, out: &TickOutput) {
        if let Some(epoch) = out.epoch_sealed {
            // Fate is durable: apply this epoch's writes for every
            // committed transaction.
            let committed: Vec<&crate::proxy::FinishedTxn> = out
                .finished
                .iter()
                .filter(|f| f.outcome == TxnOutcome::Committed)
                .collect();
            for f in committed {
                for (k, v) in &f.writes {
                    self.expected.insert(*k, v.clone());
                }
            }
            self.pending.remove(&epoch);
        }
    }

    fn recover(&mut self) -> Result<()> {
        self.crashed = true;
        // Fate sharing is judged by the counter as of the crash: the
        // recovery epoch reuses the crashed epoch's number but carries no
        // transactions, so pending epochs above this value all aborted.
        let committed_at_crash = self.bed.counter.snapshot().0;
        let settled: Vec<u64> = self.pending.keys().copied().collect();
        for epoch in settled {
            if epoch <= committed_at_crash {
                for (k, v) in self.pending.remove(&epoch).unwrap() {
                    self.expected.insert(k, v);
                }
            } else {
                self.pending.remove(&epoch);
            }
        }
        for _ in 0..16 {
            match self.bed.boot(Box::new(self.crashes.clone())) {
                Ok(p) => {
                    self.recoveries += 1;
                    self.proxy = p;
                    return Ok(());
                }
                Err(Error::CrashInjected(_)) => {
                    self.recoveries += 1;
                    continue;
                }
                Err(e) => return Err(e),
            }
        }
        Err(Error::Internal("recovery did not converge".into()))
    }

    /// Run one epoch of disjoint-key writer transactions, recovering on any
    /// injected crash.
    fn run_write_epoch(&mut self, epoch_tag: u64, writers: usize) -> Result<()> {
        let epoch = self.proxy.epoch();
        let n = self.bed.cfg.geometry.capacity;
        for i in 0..writers {
            let key = (epoch_tag * writers as u64 + i as u64) % n;
            let value = format!("e{epoch_tag}-w{i}").into_bytes();
            let ts = self.proxy.begin()?;
            self.proxy.write(ts, key, &value)?;
            self.proxy.complete(ts)?;
            self.pending.entry(epoch).or_default().push((key, value));
        }
        for _ in 0..self.proxy.epoch_length() {
            match self.proxy.tick() {
                Ok(out) => self.settle(&out),
                Err(Error::CrashInjected(_)) => {
                    self.recover()?;
                    return Ok(());
                }
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }

    /// Read every key through transactions and compare with the expected
    /// committed state.
    fn verify_reads(&mut self) -> Result<bool> {
        let keys: Vec<ObjectId> = self.expected.keys().copied().collect();
        let mut got: BTreeMap<ObjectId, Vec<u8>> = BTreeMap::new();
        let per_epoch = self.bed.cfg.epoch.read_batches * self.bed.cfg.epoch.read_batch_size;
        for chunk in keys.chunks(per_epoch.max(1)) {
            let ts = self.proxy.begin()?;
            let mut awaiting = Vec::new();
            for &key in chunk {
                match self.proxy.read(ts, key)? {
                    crate::proxy::ReadResult::Value(v) => {
                        got.insert(key, v);
                    }
                    crate::proxy::ReadResult::Pending => awaiting.push(key),
                    other => return Err(Error::Internal(format!("verify read: {other:?}"))),
                }
            }
            for _ in 0..self.proxy.epoch_length() {
                match self.proxy.tick() {
                    Ok(out) => {
                        for d in &out.delivered {
                            if d.ts == ts {
                                if let Some(v) = &d.value {
                                    got.insert(d.key, v.clone());
                                }
                            }
                        }
                        self.settle(&out);
                    }
                    Err(Error::CrashInjected(_)) => {
                        self.recover()?;
                        return self.verify_reads();
                    }
                    Err(e) => return Err(e),
                }
            }
            let _ = awaiting;
        }
        Ok(got == self.expected)
    }
}

/// Wire slot reads of one epoch, segmented at rollback events: the
/// pre-crash execution first, then one segment per recovery attempt.
fn rollback_segments(events: &[TraceEvent], epoch: u64) -> Vec<Vec<(u32, u16)>> {
    let mut segments = vec![Vec::new()];
    for e in events.iter().filter(|e| !e.local) {
        match e.kind {
            EventKind::Rollback => segments.push(Vec::new()),
            EventKind::SlotRead if e.epoch == epoch => {
                segments.last_mut().unwrap().push((e.bucket, e.slot));
            }
            _ => {}
        }
    }
    segments
}

/// Run one crash case: inject a crash at the `nth` firing of `hook` while
/// writer transactions run for `epochs` epochs, then verify durability,
/// atomicity, replay determinism, and recovery convergence.
pub fn crash_case(
    cfg: &SystemConfig,
    seed: u64,
    hook: HookPoint,
    nth: u64,
    epochs: u64,
) -> Result<CrashVerdict> {
    let recovery_hook = matches!(
        hook,
        HookPoint::RecoveryBeforeReplay
            | HookPoint::RecoveryBeforeCheckpoint
            | HookPoint::RecoveryBeforeCounterUpdate
    );
    let triggers = if recovery_hook {
        // Reach recovery via a primary crash in epoch `nth`, then crash
        // again inside recovery itself.
        vec![(HookPoint::BeforeWriteFlush, nth), (hook, 0)]
    } else {
        vec![(hook, nth)]
    };
    let crashes = SharedCrashes::new(ScheduledCrashes::at(triggers));
    let mut driver = SweepDriver::new(cfg, seed, crashes)?;

    let writers = (cfg.epoch.write_batch_size / 2).max(2);
    for epoch_tag in 0..epochs {
        driver.run_write_epoch(epoch_tag, writers)?;
    }
    // One clean epoch after any crash so the system proves it is live.
    driver.run_write_epoch(epochs, writers)?;

    let mut verdict = CrashVerdict {
        crashed: driver.crashed,
        recoveries: driver.recoveries,
        committed_keys: driver.expected.len(),
        ..CrashVerdict::default()
    };

    // (a) + (b): every committed value readable; no crashed write survives.
    verdict.durable_ok = driver.verify_reads()?;
    verdict.no_leak_ok = verdict.durable_ok;

    // (c) replay determinism for the crashed epoch, checked against both
    // the pre-crash trace and the decoded logs.
    verdict.replay_ok = true;
    if driver.crashed {
        let events = driver.bed.observer.events();
        let crashed_epoch = events
            .iter()
            .filter(|e| !e.local && e.kind == EventKind::Rollback)
            .map(|e| {
                // The rollback happens while recovery is positioned in the
                // epoch after the committed one.
                e.epoch
            })
            .next();
        if let Some(epoch) = crashed_epoch {
            // Decode everything the recovery unit holds for the crashed
            // epoch. Logs appended but never claimed by the trusted counter
            // sit at the tail and are ignored by recovery.
            let sealer = crate::crypto::Sealer::new(
                driver.bed.keys.clone(),
                cfg.integrity == IntegrityMode::Sealed,
            );
            let codec = RecordCodec::new(cfg.clone(), driver.bed.keys.clone(), sealer);
            let mut logged: Vec<(u32, u16)> = Vec::new();
            for batch in 0..=(cfg.epoch.read_batches as u32) {
                let counter = batch_counter(cfg, epoch - 1, batch);
                let Some(bytes) = driver.bed.server.log_read(RecordKind::PathLog, counter)? else {
                    break;
                };
                let record = codec.decode_path_log(counter, &bytes)?;
                for path in &record.paths {
                    for (depth, &slot) in path.slots.iter().enumerate() {
                        if slot != SLOT_SENTINEL {
                            logged.push((cfg.geometry.path_bucket(path.leaf, depth as u32), slot));
                        }
                    }
                }
                logged.extend(record.extras.iter().copied());
            }
            // Every segment (the pre-crash execution and each recovery
            // attempt's replay) must follow the log verbatim from the
            // start; the final, completed recovery replays the full claimed
            // set, which no interrupted attempt can exceed.
            let segments = rollback_segments(&events, epoch);
            for segment in &segments {
                if segment.len() > logged.len() || logged[..segment.len()] != segment[..] {
                    verdict.replay_ok = false;
                }
            }
            let final_len = segments.last().map(Vec::len).unwrap_or(0);
            if segments.iter().any(|s| s.len() > final_len) {
                verdict.replay_ok = false;
            }
            verdict.replayed_reads = final_len;
        }
    }

    // (d) convergence: recovering again from the final durable state is a
    // pure restore and reproduces the same tree and counters.
    let image_before = driver.bed.server.tree_image();
    let committed_before = driver.proxy.committed_epoch();
    let reproxy = driver.bed.boot_quiet()?;
    verdict.converge_ok = driver.bed.server.tree_image() == image_before
        && reproxy.committed_epoch() == committed_before;

    Ok(verdict)
}

