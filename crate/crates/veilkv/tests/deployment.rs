//! Deployment-level integration: the full proxy stack over the TCP wire
//! protocol and the on-disk storage mode, plus service-layer concurrency and
//! observer passivity.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use veilkv::config::{EpochShape, IntegrityMode, SystemConfig, TreeGeometry};
use veilkv::crypto::KeyMaterial;
use veilkv::durability::TrustedCounter;
use veilkv::observer::Observer;
use veilkv::oram::ObjectId;
use veilkv::proxy::{HookPoint, NoCrashes, Proxy, ReadResult, ScheduledCrashes, TxnOutcome, WriteResult};
use veilkv::storage::StorageServer;
use veilkv::transport::{serve, InProcess, StorageClient, TcpClient};
use veilkv::workload::{initial_value, run_workload, SharedCrashes, TestBed, WorkloadSpec};

fn small_cfg() -> SystemConfig {
    SystemConfig {
        geometry: TreeGeometry {
            levels: 3,
            real_slots: 3,
            dummy_slots: 6,
            evict_period: 2,
            capacity: 16,
        },
        epoch: EpochShape {
            read_batches: 2,
            read_batch_size: 6,
            write_batch_size: 4,
            batch_interval: 2,
        },
        block_size: 96,
        stash_bound: 64,
        full_checkpoint_every: 4,
        gc_windows: 2,
        workers: 2,
        integrity: IntegrityMode::Sealed,
    }
}

fn preload(n: u64) -> BTreeMap<ObjectId, Vec<u8>> {
    (0..n).map(|k| (k, initial_value(k))).collect()
}

#[test]
fn proxy_runs_over_tcp_and_recovers() {
    let cfg = small_cfg();
    let observer = Arc::new(Observer::new());
    let server = Arc::new(StorageServer::new(observer.clone()));
    let handle = serve("127.0.0.1:0", server.clone()).unwrap();
    let client: Arc<dyn StorageClient> =
        Arc::new(TcpClient::connect(&handle.local_addr.to_string()).unwrap());

    let keys = KeyMaterial::from_seed(5);
    Proxy::init_storage(&cfg, &keys, client.as_ref(), &observer, &preload(16)).unwrap();
    let counter = TrustedCounter::new_memory();

    let mut proxy = Proxy::recover(
        cfg.clone(),
        keys.clone(),
        client.clone(),
        observer.clone(),
        counter.clone(),
        Box::new(NoCrashes),
    )
    .unwrap();

    // Commit a write over the wire.
    let ts = proxy.begin().unwrap();
    assert_eq!(proxy.write(ts, 3, b"networked").unwrap(), WriteResult::Ok);
    proxy.complete(ts).unwrap();
    let mut outcome = None;
    for _ in 0..proxy.epoch_length() {
        for f in proxy.tick().unwrap().finished {
            if f.ts == ts {
                outcome = Some(f.outcome);
            }
        }
    }
    assert_eq!(outcome, Some(TxnOutcome::Committed));

    // Kill the proxy, recover over the same connection, read it back.
    drop(proxy);
    let mut proxy = Proxy::recover(
        cfg,
        keys,
        client,
        observer,
        counter,
        Box::new(NoCrashes),
    )
    .unwrap();
    let ts = proxy.begin().unwrap();
    assert_eq!(proxy.read(ts, 3).unwrap(), ReadResult::Pending);
    let mut got = None;
    for _ in 0..proxy.epoch_length() {
        for d in proxy.tick().unwrap().delivered {
            got = d.value;
        }
    }
    assert_eq!(got.as_deref(), Some(&b"networked"[..]));
    handle.stop();
}

#[test]
fn disk_storage_survives_process_style_restart() {
    let dir = std::env::temp_dir().join(format!("veilkv-deploy-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    let counter_path = dir.join("counter");
    std::fs::create_dir_all(&dir).unwrap();
    let cfg = small_cfg();
    let keys = KeyMaterial::from_seed(6);

    let committed_value = b"on-disk".to_vec();
    {
        let observer = Arc::new(Observer::new());
        let server =
            Arc::new(StorageServer::open_disk(dir.join("store"), observer.clone()).unwrap());
        let client = InProcess(server.clone());
        Proxy::init_storage(&cfg, &keys, &client, &observer, &preload(16)).unwrap();
        let counter = TrustedCounter::open(counter_path.clone()).unwrap();
        let mut proxy = Proxy::recover(
            cfg.clone(),
            keys.clone(),
            Arc::new(client),
            observer,
            counter,
            Box::new(NoCrashes),
        )
        .unwrap();
        let ts = proxy.begin().unwrap();
        proxy.write(ts, 9, &committed_value).unwrap();
        proxy.complete(ts).unwrap();
        for _ in 0..proxy.epoch_length() {
            proxy.tick().unwrap();
        }
        // Everything proxy-side drops here; only the disk and counter file
        // survive.
    }

    let observer = Arc::new(Observer::new());
    let server = Arc::new(StorageServer::open_disk(dir.join("store"), observer.clone()).unwrap());
    let counter = TrustedCounter::open(counter_path).unwrap();
    let mut proxy = Proxy::recover(
        cfg,
        keys,
        Arc::new(InProcess(server)),
        observer,
        counter,
        Box::new(NoCrashes),
    )
    .unwrap();
    assert_eq!(proxy.committed_epoch(), 1);
    let ts = proxy.begin().unwrap();
    assert_eq!(proxy.read(ts, 9).unwrap(), ReadResult::Pending);
    let mut got = None;
    for _ in 0..proxy.epoch_length() {
        for d in proxy.tick().unwrap().delivered {
            got = d.value;
        }
    }
    assert_eq!(got, Some(committed_value));
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn concurrent_sessions_get_distinct_timestamps() {
    // The proxy core is single-owner; a service layer serializes it behind
    // a lock. A thousand begins across threads stay unique and monotone
    // per thread.
    let bed = TestBed::in_memory(small_cfg(), 7, 16).unwrap();
    let proxy = Arc::new(Mutex::new(bed.boot_quiet().unwrap()));
    let mut handles = Vec::new();
    for _ in 0..8 {
        let proxy = proxy.clone();
        handles.push(std::thread::spawn(move || {
            let mut seen = Vec::with_capacity(125);
            for _ in 0..125 {
                seen.push(proxy.lock().unwrap().begin().unwrap());
            }
            seen
        }));
    }
    let mut all: Vec<u64> = handles.into_iter().flat_map(|h| h.join().unwrap()).collect();
    assert_eq!(all.len(), 1000);
    all.sort_unstable();
    all.dedup();
    assert_eq!(all.len(), 1000, "timestamps must be unique");
}

#[test]
fn observer_is_passive() {
    // Identical runs with recording enabled and disabled produce identical
    // trees and transaction outcomes.
    let run = |record: bool| {
        let cfg = small_cfg();
        let observer =
            Arc::new(if record { Observer::new() } else { Observer::disabled() });
        let server = Arc::new(StorageServer::new(observer.clone()));
        let keys = KeyMaterial::from_seed(11);
        let client = InProcess(server.clone());
        Proxy::init_storage(&cfg, &keys, &client, &observer, &preload(16)).unwrap();
        let mut proxy = Proxy::recover(
            cfg,
            keys,
            Arc::new(client),
            observer,
            TrustedCounter::new_memory(),
            Box::new(NoCrashes),
        )
        .unwrap();
        let mut outcomes = Vec::new();
        for round in 0..3u64 {
            let ts = proxy.begin().unwrap();
            proxy.write(ts, round, format!("r{round}").as_bytes()).unwrap();
            let _ = proxy.read(ts, (round + 5) % 16).unwrap();
            proxy.complete(ts).unwrap();
            for _ in 0..proxy.epoch_length() {
                for f in proxy.tick().unwrap().finished {
                    outcomes.push((f.ts, f.outcome));
                }
            }
        }
        (server.tree_image(), outcomes)
    };
    let (tree_recorded, outcomes_recorded) = run(true);
    let (tree_silent, outcomes_silent) = run(false);
    assert_eq!(tree_recorded, tree_silent);
    assert_eq!(outcomes_recorded, outcomes_silent);
}

#[test]
fn golden_run_ten_thousand_ops() {
    // A crash-free uniform run at scale: every report verdict must hold,
    // and read batches must fire on a fixed cadence.
    let cfg = SystemConfig {
        geometry: TreeGeometry {
            levels: 5,
            real_slots: 3,
            dummy_slots: 6,
            evict_period: 2,
            capacity: 48,
        },
        epoch: EpochShape {
            read_batches: 4,
            read_batch_size: 16,
            write_batch_size: 16,
            batch_interval: 3,
        },
        block_size: 96,
        stash_bound: 96,
        full_checkpoint_every: 8,
        gc_windows: 2,
        workers: 1,
        integrity: IntegrityMode::Sealed,
    };
    let bed = TestBed::in_memory(cfg.clone(), 2718, 48).unwrap();
    let spec = WorkloadSpec {
        kind: veilkv::workload::WorkloadKind::Uniform { read_ratio: 0.6 },
        key_space: 48,
        txns_per_session: 420, // ~10k operations at 3 ops per transaction
        ops_per_txn: (2, 4),
        sessions: 8,
        seed: 2718,
    };
    let out = run_workload(&bed, &spec, SharedCrashes::none()).unwrap();
    let report = &out.report;
    assert!(report.committed + report.aborted >= 3000, "{}", report.render());
    assert_eq!(report.serializable, Some(true));
    assert_eq!(report.replay_equal, Some(true));
    assert_eq!(report.slot_reuse_violations, 0);
    assert!(report.uniformity_p.unwrap_or(0.0) > 0.01, "{}", report.render());
    assert!(report.stash_high_water < report.stash_bound);

    // Batch cadence: within every epoch, consecutive read batches fire
    // exactly one interval apart.
    use veilkv::observer::EventKind;
    let mut per_epoch: std::collections::BTreeMap<u64, Vec<u64>> = Default::default();
    for e in bed.observer.events() {
        if e.kind == EventKind::LogAppend && !e.local && e.batch != veilkv::observer::NO_BATCH {
            per_epoch.entry(e.epoch).or_default().push(e.tick);
        }
    }
    assert!(per_epoch.len() >= 10);
    for (epoch, ticks) in per_epoch {
        assert_eq!(ticks.len(), 4, "epoch {epoch} fired {} batches", ticks.len());
        for pair in ticks.windows(2) {
            assert_eq!(pair[1] - pair[0], 3, "epoch {epoch} cadence drifted: {ticks:?}");
        }
    }
}

#[test]
fn random_crash_schedule_recovers() {
    let bed = TestBed::in_memory(small_cfg(), 13, 16).unwrap();
    let spec = WorkloadSpec::uniform(16, 8, 4, 13);
    let triggers = ScheduledCrashes::random_triggers(99, 3, 6);
    let crashes = SharedCrashes::new(ScheduledCrashes::at(triggers));
    let out = run_workload(&bed, &spec, crashes).unwrap();
    assert!(out.report.crashes > 0, "schedule never fired");
    assert_eq!(out.report.slot_reuse_violations, 0);
    assert!(out.report.committed > 0);
}

#[test]
fn committed_history_spanning_a_crash_stays_serializable() {
    // Timestamps survive recovery via the checkpoint high-water, so a
    // history with commits on both sides of a crash replays cleanly.
    let bed = TestBed::in_memory(small_cfg(), 15, 16).unwrap();
    let spec = WorkloadSpec::uniform(16, 10, 4, 15);
    let crashes =
        SharedCrashes::new(ScheduledCrashes::at(vec![(HookPoint::BeforeWriteFlush, 1)]));
    let out = run_workload(&bed, &spec, crashes).unwrap();
    assert_eq!(out.report.crashes, 1);
    assert!(out.report.history_complete, "{}", out.report.render());
    assert_eq!(out.report.serializable, Some(true), "{:?}", out.report.cycle_witness);
    assert_eq!(out.report.replay_equal, Some(true), "{}", out.report.render());
    assert!(out.report.committed > 0);
}
