//! Workload generation and the deterministic run harness: drives concurrent
//! client sessions against a proxy, injects scheduled crashes, recovers,
//! and assembles a run report with the trace verdicts.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::config::SystemConfig;
use crate::crypto::KeyMaterial;
use crate::error::{Error, Result};
use crate::mvtso::Timestamp;
use crate::observer::{self, Observer, Uniformity};
use crate::oram::ObjectId;
use crate::proxy::{
    CrashHooks, Delivery, HookPoint, NoCrashes, Proxy, ReadResult, ScheduledCrashes, TickOutput,
    TxnOutcome, WriteResult,
};
use crate::sgraph::{check_serializability, CommittedTxn};
use crate::storage::StorageServer;
use crate::transport::{InProcess, StorageClient};

// ---------------------------------------------------------------------------
// Workload specification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum WorkloadKind {
    /// Uniformly random keys.
    Uniform { read_ratio: f64 },
    /// Zipfian-skewed keys (YCSB-style exponent).
    Zipfian { theta: f64, read_ratio: f64 },
    /// Bank-style mix: transfers, deposits, and balance checks over
    /// account rows.
    TransferMix,
    /// Explicit per-session scripts.
    Scripted(Vec<Vec<ScriptOp>>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScriptOp {
    Read(ObjectId),
    Write(ObjectId, Vec<u8>),
    Commit,
    Abort,
    /// Skip this many scheduling turns.
    Pause(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    /// Number of distinct objects (preloaded before the run).
    pub key_space: u64,
    /// Transactions to attempt per session.
    pub txns_per_session: usize,
    /// Operations per generated transaction (inclusive range).
    pub ops_per_txn: (usize, usize),
    pub sessions: usize,
    pub seed: u64,
}

impl WorkloadSpec {
    pub fn uniform(key_space: u64, txns: usize, sessions: usize, seed: u64) -> Self {
        WorkloadSpec {
            kind: WorkloadKind::Uniform { read_ratio: 0.6 },
            key_space,
            txns_per_session: txns,
            ops_per_txn: (2, 5),
            sessions,
            seed,
        }
    }
}

/// Zipfian sampler over `0..n` by inverse CDF.
pub struct Zipfian {
    cdf: Vec<f64>,
}

impl Zipfian {
    pub fn new(n: u64, theta: f64) -> Self {
        let mut cdf = Vec::with_capacity(n as usize);
        let mut total = 0.0;
        for i in 1..=n {
            total += 1.0 / (i as f64).powf(theta);
            cdf.push(total);
        }
        for c in cdf.iter_mut() {
            *c /= total;
        }
        Zipfian { cdf }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> u64 {
        let u: f64 = rng.gen();
        self.cdf.partition_point(|&c| c < u) as u64
    }
}

// ---------------------------------------------------------------------------
// Test bed
// ---------------------------------------------------------------------------

/// Shared crash schedule that survives proxy incarnations, so occurrence
/// counts keep advancing through recoveries.
#[derive(Clone)]
pub struct SharedCrashes(pub Arc<Mutex<ScheduledCrashes>>);

impl SharedCrashes {
    pub fn new(schedule: ScheduledCrashes) -> Self {
        SharedCrashes(Arc::new(Mutex::new(schedule)))
    }

    pub fn none() -> Self {
        Self::new(ScheduledCrashes::at(Vec::new()))
    }
}

impl CrashHooks for SharedCrashes {
    fn check(&mut self, point: HookPoint) -> bool {
        self.0.lock().unwrap().check(point)
    }
}

/// Everything that outlives a proxy crash: keys, the trusted counter, the
/// storage server, and the observer.
pub struct TestBed {
    pub cfg: SystemConfig,
    pub keys: KeyMaterial,
    pub server: Arc<StorageServer>,
    pub observer: Arc<Observer>,
    pub counter: crate::durability::TrustedCounter,
    pub store: Arc<dyn StorageClient>,
}

pub fn initial_value(key: ObjectId) -> Vec<u8> {
    format!("init-{key}").into_bytes()
}

impl TestBed {
    /// In-memory bed with `preload` objects written at initialization.
    pub fn in_memory(cfg: SystemConfig, seed: u64, preload: u64) -> Result<Self> {
        let observer = Arc::new(Observer::new());
        let server = Arc::new(StorageServer::new(observer.clone()));
        let keys = KeyMaterial::from_seed(seed);
        let data: BTreeMap<ObjectId, Vec<u8>> =
            (0..preload).map(|k| (k, initial_value(k))).collect();
        Proxy::init_storage(&cfg, &keys, &InProcess(server.clone()), &observer, &data)?;
        let store: Arc<dyn StorageClient> = Arc::new(InProcess(server.clone()));
        Ok(TestBed {
            cfg,
            keys,
            server,
            observer,
            counter: crate::durability::TrustedCounter::new_memory(),
            store,
        })
    }

    /// Disk-backed bed rooted at `dir`, resuming existing state or
    /// initializing `preload` objects on first use. The trusted counter
    /// lives beside the store.
    pub fn on_disk(
        cfg: SystemConfig,
        seed: u64,
        preload: u64,
        dir: &std::path::Path,
    ) -> Result<Self> {
        let observer = Arc::new(Observer::new());
        let server =
            Arc::new(crate::storage::StorageServer::open_disk(dir.join("store"), observer.clone())?);
        let counter = crate::durability::TrustedCounter::open(dir.join("counter"))?;
        let keys = KeyMaterial::from_seed(seed);
        let client = InProcess(server.clone());
        let initialized = server.log_read(crate::wire::RecordKind::FullCheckpoint, 0)?.is_some();
        if !initialized {
            let data: BTreeMap<ObjectId, Vec<u8>> =
                (0..preload).map(|k| (k, initial_value(k))).collect();
            Proxy::init_storage(&cfg, &keys, &client, &observer, &data)?;
        }
        let store: Arc<dyn StorageClient> = Arc::new(client);
        Ok(TestBed { cfg, keys, server, observer, counter, store })
    }

    pub fn boot(&self, hooks: Box<dyn CrashHooks>) -> Result<Proxy> {
        Proxy::recover(
            self.cfg.clone(),
            self.keys.clone(),
            self.store.clone(),
            self.observer.clone(),
            self.counter.clone(),
            hooks,
        )
    }

    pub fn boot_quiet(&self) -> Result<Proxy> {
        self.boot(Box::new(NoCrashes))
    }
}

// ---------------------------------------------------------------------------
// Runner
// ---------------------------------------------------------------------------

struct Session {
    rng: ChaCha12Rng,
    script: Option<std::collections::VecDeque<ScriptOp>>,
    txn: Option<Timestamp>,
    pending: std::collections::VecDeque<ScriptOp>,
    awaiting: Option<ObjectId>,
    pause: u64,
    txns_started: usize,
    done: bool,
}

#[derive(Debug, Clone, Default)]
pub struct RunReport {
    pub committed: usize,
    pub aborted: usize,
    pub aborted_by_reason: BTreeMap<String, usize>,
    pub serializable: Option<bool>,
    pub replay_equal: Option<bool>,
    pub cycle_witness: Option<Vec<Timestamp>>,
    pub slot_reuse_violations: usize,
    pub uniformity_stat: Option<f64>,
    pub uniformity_p: Option<f64>,
    pub uniformity_samples: usize,
    pub stash_high_water: usize,
    pub stash_bound: usize,
    pub epochs_sealed: u64,
    pub ticks: u64,
    pub wall_ms: u128,
    pub crashes: usize,
    pub integrity_alarms: usize,
    /// False when a crash swallowed commit notifications, making the
    /// collected history incomplete for replay checking.
    pub history_complete: bool,
}

impl RunReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: String| out.push_str(&format!("{k}: {v}\n"));
        line("committed", self.committed.to_string());
        line("aborted", self.aborted.to_string());
        for (reason, n) in &self.aborted_by_reason {
            line(&format!("aborted.{reason}"), n.to_string());
        }
        line(
            "serializable",
            self.serializable.map(|b| b.to_string()).unwrap_or_else(|| "unchecked".into()),
        );
        line(
            "replay_equal",
            self.replay_equal.map(|b| b.to_string()).unwrap_or_else(|| "unchecked".into()),
        );
        if let Some(cycle) = &self.cycle_witness {
            line("cycle_witness", format!("{cycle:?}"));
        }
        line("slot_reuse_violations", self.slot_reuse_violations.to_string());
        line(
            "leaf_uniformity_p",
            self.uniformity_p.map(|p| format!("{p:.6}")).unwrap_or_else(|| "inconclusive".into()),
        );
        line(
            "leaf_uniformity_stat",
            self.uniformity_stat.map(|s| format!("{s:.3}")).unwrap_or_else(|| "-".into()),
        );
        line("leaf_uniformity_samples", self.uniformity_samples.to_string());
        line("stash_high_water", self.stash_high_water.to_string());
        line("stash_bound", self.stash_bound.to_string());
        line("epochs_sealed", self.epochs_sealed.to_string());
        line("ticks", self.ticks.to_string());
        line("wall_ms", self.wall_ms.to_string());
        line("crashes", self.crashes.to_string());
        line("integrity_alarms", self.integrity_alarms.to_string());
        line("history_complete", self.history_complete.to_string());
        out
    }
}

pub struct RunOutcome {
    pub report: RunReport,
    pub history: Vec<CommittedTxn>,
}

fn reason_key(outcome: &TxnOutcome) -> String {
    match outcome {
        TxnOutcome::Committed => "committed".into(),
        TxnOutcome::Aborted(reason) => format!("{reason:?}").to_lowercase(),
    }
}

/// Drive `spec` against a bed, recovering through any scheduled crashes.
pub fn run_workload(
    bed: &TestBed,
    spec: &WorkloadSpec,
    crashes: SharedCrashes,
) -> Result<RunOutcome> {
    let start = std::time::Instant::now();
    let mut proxy = bed.boot(Box::new(crashes.clone()))?;

    let mut sessions: Vec<Session> = (0..spec.sessions.max(1))
        .map(|i| {
            let script = match &spec.kind {
                WorkloadKind::Scripted(scripts) => {
                    Some(scripts.get(i).cloned().unwrap_or_default().into())
                }
                _ => None,
            };
            Session {
                rng: ChaCha12Rng::seed_from_u64(spec.seed.wrapping_add(i as u64 * 977)),
                script,
                txn: None,
                pending: Default::default(),
                awaiting: None,
                pause: 0,
                txns_started: 0,
                done: false,
            }
        })
        .collect();

    let zipf = match spec.kind {
        WorkloadKind::Zipfian { theta, .. } => Some(Zipfian::new(spec.key_space, theta)),
        _ => None,
    };

    let mut report = RunReport {
        stash_bound: bed.cfg.stash_bound,
        history_complete: true,
        ..RunReport::default()
    };
    let mut history: Vec<CommittedTxn> = Vec::new();
    let mut notified_epochs: Vec<u64> = Vec::new();
    let mut op_counter = 0u64;

    let max_ticks = 4_000_000u64;
    let mut ticks = 0u64;
    loop {
        if ticks >= max_ticks {
            return Err(Error::Internal("workload did not converge within the tick budget".into()));
        }

        // One scheduling turn per session.
        for session in sessions.iter_mut() {
            if session.done {
                continue;
            }
            if session.pause > 0 {
                session.pause -= 1;
                continue;
            }
            if session.awaiting.is_some() {
                continue;
            }
            match step_session(&mut proxy, session, spec, &zipf, &mut op_counter) {
                Ok(()) => {}
                Err(Error::CrashInjected(_)) => unreachable!("client ops cannot crash"),
                Err(e) => return Err(e),
            }
        }

        // Advance time; a crash here abandons the epoch and recovers.
        ticks += 1;
        match proxy.tick() {
            Ok(out) => {
                dispatch_tick(&out, &mut sessions, &mut report, &mut history);
                if let Some(epoch) = out.epoch_sealed {
                    notified_epochs.push(epoch);
                }
            }
            Err(Error::CrashInjected(_)) => {
                report.crashes += 1;
                // Notifications are lost only if an epoch committed (the
                // counter advanced) without its seal output arriving; the
                // recovery epoch itself carries no transactions.
                let committed_at_crash = bed.counter.snapshot().0;
                if committed_at_crash > notified_epochs.last().copied().unwrap_or(0) {
                    report.history_complete = false;
                }
                for session in sessions.iter_mut() {
                    if session.txn.take().is_some() {
                        report.aborted += 1;
                        *report.aborted_by_reason.entry("crash".into()).or_insert(0) += 1;
                    }
                    session.awaiting = None;
                    session.pending.clear();
                }
                let mut recovered = None;
                for _ in 0..32 {
                    match bed.boot(Box::new(crashes.clone())) {
                        Ok(p) => {
                            recovered = Some(p);
                            break;
                        }
                        Err(Error::CrashInjected(_)) => {
                            report.crashes += 1;
                            continue;
                        }
                        Err(Error::Integrity(msg)) => {
                            report.integrity_alarms += 1;
                            return Err(Error::Integrity(msg));
                        }
                        Err(e) => return Err(e),
                    }
                }
                let new_proxy =
                    recovered.ok_or_else(|| Error::Internal("recovery never converged".into()))?;
                notified_epochs.push(new_proxy.committed_epoch());
                proxy = new_proxy;
            }
            Err(Error::Integrity(msg)) => {
                report.integrity_alarms += 1;
                return Err(Error::Integrity(msg));
            }
            Err(e) => return Err(e),
        }

        if sessions.iter().all(|s| s.done && s.txn.is_none()) {
            // Drain the epoch in progress so the last outcomes already
            // decided (aborts observed at submit time) are released too.
            for _ in 0..proxy.epoch_length() * 2 {
                ticks += 1;
                match proxy.tick() {
                    Ok(out) => {
                        dispatch_tick(&out, &mut sessions, &mut report, &mut history);
                        if out.epoch_sealed.is_some() {
                            break;
                        }
                    }
                    Err(Error::CrashInjected(_)) => break,
                    Err(e) => return Err(e),
                }
            }
            break;
        }
    }

    report.ticks = ticks;
    report.epochs_sealed = proxy.stats.epochs_sealed;
    report.stash_high_water = proxy.stats.stash_high_water;
    report.wall_ms = start.elapsed().as_millis();

    // Trace verdicts.
    let events = bed.observer.events();
    report.slot_reuse_violations = observer::slot_reuse_check(&events).len();
    match observer::leaf_uniformity_test(&events, &bed.cfg.geometry) {
        Uniformity::Tested(t) => {
            report.uniformity_stat = Some(t.statistic);
            report.uniformity_p = Some(t.p_value);
            report.uniformity_samples =
                observer::leaf_histogram(&events, &bed.cfg.geometry).iter().sum::<u64>() as usize;
        }
        Uniformity::Inconclusive { samples, .. } => {
            report.uniformity_samples = samples;
        }
    }
    if report.history_complete {
        let verdict = check_serializability(&history);
        report.serializable = Some(verdict.serializable);
        report.replay_equal = Some(verdict.replay_equal);
        report.cycle_witness = verdict.cycle;
    }

    Ok(RunOutcome { report, history })
}

fn dispatch_tick(
    out: &TickOutput,
    sessions: &mut [Session],
    report: &mut RunReport,
    history: &mut Vec<CommittedTxn>,
) {
    for Delivery { ts, key, value } in &out.delivered {
        for session in sessions.iter_mut() {
            if session.txn == Some(*ts) && session.awaiting == Some(*key) {
                session.awaiting = None;
                if value.is_none() {
                    // Transaction died while waiting.
                    session.txn = None;
                    session.pending.clear();
                }
            }
        }
    }
    for finished in &out.finished {
        match finished.outcome {
            TxnOutcome::Committed => {
                report.committed += 1;
                history.push(CommittedTxn {
                    ts: finished.ts,
                    reads: finished.reads.clone(),
                    writes: finished.writes.iter().map(|(k, _)| *k).collect(),
                });
            }
            TxnOutcome::Aborted(_) => {
                report.aborted += 1;
                *report
                    .aborted_by_reason
                    .entry(reason_key(&finished.outcome))
                    .or_insert(0) += 1;
            }
        }
        for session in sessions.iter_mut() {
            if session.txn == Some(finished.ts) {
                session.txn = None;
                session.awaiting = None;
                session.pending.clear();
            }
        }
    }
}

fn generate_txn_ops(
    spec: &WorkloadSpec,
    zipf: &Option<Zipfian>,
    rng: &mut ChaCha12Rng,
    op_counter: &mut u64,
) -> Vec<ScriptOp> {
    let mut ops = Vec::new();
    match &spec.kind {
        WorkloadKind::Uniform { read_ratio } | WorkloadKind::Zipfian { read_ratio, .. } => {
            let n = rng.gen_range(spec.ops_per_txn.0..=spec.ops_per_txn.1);
            for _ in 0..n {
                let key = match zipf {
                    Some(z) => z.sample(rng),
                    None => rng.gen_range(0..spec.key_space),
                };
                if rng.gen_bool(*read_ratio) {
                    ops.push(ScriptOp::Read(key));
                } else {
                    *op_counter += 1;
                    ops.push(ScriptOp::Write(key, format!("w{op_counter}").into_bytes()));
                }
            }
        }
        WorkloadKind::TransferMix => {
            let a = rng.gen_range(0..spec.key_space);
            let b = (a + 1 + rng.gen_range(0..spec.key_space.max(2) - 1)) % spec.key_space;
            *op_counter += 1;
            match rng.gen_range(0..10) {
                // Transfer: read both accounts, write both.
                0..=3 => {
                    ops.push(ScriptOp::Read(a));
                    ops.push(ScriptOp::Read(b));
                    ops.push(ScriptOp::Write(a, format!("xfer-{op_counter}-a").into_bytes()));
                    ops.push(ScriptOp::Write(b, format!("xfer-{op_counter}-b").into_bytes()));
                }
                // Deposit: read-modify-write one account.
                4..=6 => {
                    ops.push(ScriptOp::Read(a));
                    ops.push(ScriptOp::Write(a, format!("dep-{op_counter}").into_bytes()));
                }
                // Balance check.
                _ => ops.push(ScriptOp::Read(a)),
            }
        }
        WorkloadKind::Scripted(_) => unreachable!("scripted sessions do not generate"),
    }
    ops.push(ScriptOp::Commit);
    ops
}

fn step_session(
    proxy: &mut Proxy,
    session: &mut Session,
    spec: &WorkloadSpec,
    zipf: &Option<Zipfian>,
    op_counter: &mut u64,
) -> Result<()> {
    if session.txn.is_none() {
        // Start the next transaction, or finish the session.
        let ops: Vec<ScriptOp> = match &mut session.script {
            Some(script) => {
                if script.is_empty() {
                    session.done = true;
                    return Ok(());
                }
                // Scripted sessions carry explicit commits; pull until one.
                let mut ops = Vec::new();
                while let Some(op) = script.pop_front() {
                    let is_end = matches!(op, ScriptOp::Commit | ScriptOp::Abort);
                    ops.push(op);
                    if is_end {
                        break;
                    }
                }
                ops
            }
            None => {
                if session.txns_started >= spec.txns_per_session {
                    session.done = true;
                    return Ok(());
                }
                generate_txn_ops(spec, zipf, &mut session.rng, op_counter)
            }
        };
        session.txns_started += 1;
        session.txn = Some(proxy.begin()?);
        session.pending = ops.into();
        return Ok(());
    }

    let ts = session.txn.unwrap();
    let Some(op) = session.pending.pop_front() else {
        // Script ended without commit: leave the transaction unfinished so
        // the epoch boundary aborts it.
        return Ok(());
    };
    match op {
        ScriptOp::Pause(n) => session.pause = n,
        ScriptOp::Read(key) => match proxy.read(ts, key)? {
            ReadResult::Value(_) => {}
            ReadResult::Pending => session.awaiting = Some(key),
            ReadResult::NotFound => {}
            ReadResult::Aborted(_) => {
                session.txn = None;
                session.pending.clear();
            }
        },
        ScriptOp::Write(key, value) => match proxy.write(ts, key, &value)? {
            WriteResult::Ok => {}
            WriteResult::Aborted(_) => {
                session.txn = None;
                session.pending.clear();
            }
        },
        ScriptOp::Commit => {
            proxy.complete(ts)?;
            // Outcome arrives with the epoch seal.
        }
        ScriptOp::Abort => {
            proxy.abort(ts)?;
        }
    }
    Ok(())
}
