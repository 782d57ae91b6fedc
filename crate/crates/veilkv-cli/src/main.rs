//! Command-line harness: workload runs, benchmarks, crash sweeps, offline
//! trace checks, a standalone storage server, and standalone recovery.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::sync::Arc;

use veilkv::config::SystemConfig;
use veilkv::crypto::KeyMaterial;
use veilkv::durability::TrustedCounter;
use veilkv::error::Error;
use veilkv::observer::{self, Observer, Uniformity};
use veilkv::proxy::{HookPoint, Proxy, ScheduledCrashes, ALL_HOOKS};
use veilkv::storage::{Attack, StorageServer};
use veilkv::transport::{self, InProcess, StorageClient, TcpClient};
use veilkv::workload::{run_workload, SharedCrashes, TestBed, WorkloadKind, WorkloadSpec};

const USAGE: &str = "\
veilkv <command> [flags]

Commands:
  run            Execute a workload against an in-process deployment
  bench          Compare batched-parallel vs sequential execution
  crash-sweep    Inject a crash at every hook point and verify recovery
  check-trace    Verify an exported trace file offline
  serve-storage  Run the storage server on a TCP listener
  recover        Recover proxy state against a storage server and report

Common flags:
  --config FILE        key = value parameter file (try `run --print-config`)
  --seed N             deterministic seed (default 1)

run flags:
  --workload KIND      uniform | zipfian | transfer   (default uniform)
  --txns N             transactions per session       (default 25)
  --sessions N         concurrent client sessions     (default 8)
  --keys N             preloaded key space            (default capacity/2)
  --theta X            zipfian exponent               (default 0.99)
  --read-ratio X       read fraction                  (default 0.6)
  --crash HOOK:N       crash at the N-th firing of HOOK (repeatable)
  --random-crashes N   N seeded random crash points
  --trace FILE         write the access trace
  --report FILE        write the run report (also printed)
  --dir PATH           persistent deployment directory (store + counter)
  --print-config       print the effective config and exit

bench flags:
  --latency-ms N       simulated storage latency      (default 5)
  --batch N            logical reads per batch        (default 64)
  --workers N          parallel in-flight requests    (default 32)

crash-sweep flags:
  --epochs N           epochs to sweep                (default 3)

check-trace flags:
  --trace FILE         trace to verify (required)

serve-storage flags:
  --listen ADDR        listen address                 (default 127.0.0.1:4970)
  --dir PATH           on-disk storage directory      (default in-memory)
  --attack-script FILE scripted malicious behavior

recover flags:
  --counter-file FILE  trusted counter cell (required)
  --dir PATH           on-disk storage directory, or
  --storage tcp:ADDR   remote storage server
";

struct Flags {
    values: BTreeMap<String, Vec<String>>,
}

impl Flags {
    fn parse(args: &[String]) -> Result<Flags, String> {
        let mut values: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let mut i = 0;
        while i < args.len() {
            let arg = &args[i];
            if let Some(name) = arg.strip_prefix("--") {
                if let Some((k, v)) = name.split_once('=') {
                    values.entry(k.to_string()).or_default().push(v.to_string());
                } else if i + 1 < args.len() && !args[i + 1].starts_with("--") {
                    values.entry(name.to_string()).or_default().push(args[i + 1].clone());
                    i += 1;
                } else {
                    values.entry(name.to_string()).or_default().push(String::new());
                }
            } else {
                return Err(format!("unexpected argument {arg:?}"));
            }
            i += 1;
        }
        Ok(Flags { values })
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).and_then(|v| v.last()).map(String::as_str)
    }

    fn all(&self, key: &str) -> impl Iterator<Item = &str> {
        self.values.get(key).into_iter().flatten().map(String::as_str)
    }

    fn has(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    fn num<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, String> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| format!("bad value for --{key}: {v:?}")),
        }
    }
}

fn load_config(flags: &Flags) -> Result<SystemConfig, String> {
    match flags.get("config") {
        None => Ok(SystemConfig::desk_default()),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| format!("{path}: {e}"))?;
            SystemConfig::parse(&text).map_err(|e| e.to_string())
        }
    }
}

const HOOK_NAMES: [(&str, HookPoint); 10] = [
    ("path-log", HookPoint::BeforePathLogWrite),
    ("batch-counter", HookPoint::BeforeBatchCounterUpdate),
    ("batch-reads", HookPoint::BeforeBatchReads),
    ("write-flush", HookPoint::BeforeWriteFlush),
    ("checkpoint", HookPoint::BeforeCheckpointWrite),
    ("epoch-counter", HookPoint::BeforeEpochCounterUpdate),
    ("commit-notify", HookPoint::BeforeCommitNotify),
    ("recovery-replay", HookPoint::RecoveryBeforeReplay),
    ("recovery-checkpoint", HookPoint::RecoveryBeforeCheckpoint),
    ("recovery-counter", HookPoint::RecoveryBeforeCounterUpdate),
];

fn parse_hook(name: &str) -> Result<HookPoint, String> {
    HOOK_NAMES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|&(_, h)| h)
        .ok_or_else(|| {
            let names: Vec<&str> = HOOK_NAMES.iter().map(|(n, _)| *n).collect();
            format!("unknown hook {name:?}; one of {names:?}")
        })
}

fn hook_name(hook: HookPoint) -> &'static str {
    HOOK_NAMES.iter().find(|(_, h)| *h == hook).map(|(n, _)| *n).unwrap_or("?")
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some((command, rest)) = args.split_first() else {
        eprint!("{USAGE}");
        return ExitCode::FAILURE;
    };
    let flags = match Flags::parse(rest) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    let outcome = match command.as_str() {
        "run" => cmd_run(&flags),
        "bench" => cmd_bench(&flags),
        "crash-sweep" => cmd_crash_sweep(&flags),
        "check-trace" => cmd_check_trace(&flags),
        "serve-storage" => cmd_serve_storage(&flags),
        "recover" => cmd_recover(&flags),
        "help" | "--help" | "-h" => {
            print!("{USAGE}");
            Ok(())
        }
        other => Err(format!("unknown command {other:?}\n\n{USAGE}")),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_run(flags: &Flags) -> Result<(), String> {
    let cfg = load_config(flags)?;
    if flags.has("print-config") {
        print!("{}", cfg.render());
        return Ok(());
    }
    let seed: u64 = flags.num("seed", 1)?;
    let keys: u64 = flags.num("keys", cfg.geometry.capacity / 2)?;
    let txns: usize = flags.num("txns", 25)?;
    let sessions: usize = flags.num("sessions", 8)?;
    let read_ratio: f64 = flags.num("read-ratio", 0.6)?;
    let theta: f64 = flags.num("theta", 0.99)?;
    let kind = match flags.get("workload").unwrap_or("uniform") {
        "uniform" => WorkloadKind::Uniform { read_ratio },
        "zipfian" => WorkloadKind::Zipfian { theta, read_ratio },
        "transfer" => WorkloadKind::TransferMix,
        other => return Err(format!("unknown workload {other:?}")),
    };
    let spec = WorkloadSpec {
        kind,
        key_space: keys,
        txns_per_session: txns,
        ops_per_txn: (2, 5),
        sessions,
        seed,
    };
    let mut triggers = Vec::new();
    for c in flags.all("crash") {
        let (hook, nth) =
            c.split_once(':').ok_or_else(|| format!("--crash wants HOOK:N, got {c:?}"))?;
        triggers.push((
            parse_hook(hook)?,
            nth.parse::<u64>().map_err(|_| format!("bad crash index {nth:?}"))?,
        ));
    }
    let random_crashes: usize = flags.num("random-crashes", 0)?;
    triggers.extend(ScheduledCrashes::random_triggers(seed, random_crashes, 8));

    let bed = match flags.get("dir") {
        Some(dir) => TestBed::on_disk(cfg, seed, keys, std::path::Path::new(dir))
            .map_err(|e| e.to_string())?,
        None => TestBed::in_memory(cfg, seed, keys).map_err(|e| e.to_string())?,
    };
    let crashes = SharedCrashes::new(ScheduledCrashes::at(triggers));
    let out = run_workload(&bed, &spec, crashes).map_err(|e| e.to_string())?;
    let rendered = out.report.render();
    print!("{rendered}");
    if let Some(path) = flags.get("report") {
        std::fs::write(path, &rendered).map_err(|e| format!("{path}: {e}"))?;
    }
    if let Some(path) = flags.get("trace") {
        std::fs::write(path, bed.observer.export()).map_err(|e| format!("{path}: {e}"))?;
        println!("trace: {path}");
    }
    Ok(())
}

fn cmd_bench(flags: &Flags) -> Result<(), String> {
    let mut cfg = load_config(flags)?;
    let latency_ms: u64 = flags.num("latency-ms", 5)?;
    let batch: usize = flags.num("batch", 64)?;
    let workers: usize = flags.num("workers", 32)?;
    let seed: u64 = flags.num("seed", 1)?;
    cfg.epoch.read_batch_size = batch.max(1);
    cfg.epoch.read_batches = 8;
    cfg.epoch.write_batch_size =
        veilkv::bench::align_write_batch(&cfg).map_err(|e| e.to_string())?;
    let result = veilkv::bench::parallel_vs_sequential(&cfg, seed, latency_ms, workers)
        .map_err(|e| e.to_string())?;
    println!("batch_size: {batch}");
    println!("latency_ms: {latency_ms}");
    println!("workers: {workers}");
    println!("sequential_ms: {}", result.sequential_ms);
    println!("parallel_ms: {}", result.parallel_ms);
    println!("speedup: {:.2}", result.speedup());
    println!("oracle_root_writes_per_epoch: {}", result.oracle_root_writes);
    println!("batched_root_writes_per_epoch: {}", result.batched_root_writes);
    Ok(())
}

fn cmd_crash_sweep(flags: &Flags) -> Result<(), String> {
    let cfg = match flags.get("config") {
        Some(_) => load_config(flags)?,
        None => veilkv::bench::sweep_config(),
    };
    let epochs: u64 = flags.num("epochs", 3)?;
    let seed: u64 = flags.num("seed", 1)?;
    let mut failures = 0usize;
    let mut cases = 0usize;
    for &hook in ALL_HOOKS.iter() {
        let occurrences = veilkv::bench::hook_occurrences(&cfg, hook, epochs);
        for nth in 0..occurrences {
            cases += 1;
            match veilkv::bench::crash_case(&cfg, seed, hook, nth, epochs) {
                Ok(verdict) if verdict.ok() => {
                    println!("PASS {}:{nth} {}", hook_name(hook), verdict.summary());
                }
                Ok(verdict) => {
                    failures += 1;
                    println!("FAIL {}:{nth} {}", hook_name(hook), verdict.summary());
                }
                Err(e) => {
                    failures += 1;
                    println!("FAIL {}:{nth} error: {e}", hook_name(hook));
                }
            }
        }
    }
    println!("cases: {cases}  failures: {failures}");
    if failures > 0 {
        return Err(format!("{failures} crash cases failed"));
    }
    Ok(())
}

fn cmd_check_trace(flags: &Flags) -> Result<(), String> {
    let path = flags.get("trace").ok_or("--trace FILE is required")?;
    let cfg = load_config(flags)?;
    let text = std::fs::read_to_string(path).map_err(|e| format!("{path}: {e}"))?;
    let events = Observer::import(&text).map_err(|e| e.to_string())?;
    let reuse = observer::slot_reuse_check(&events);
    println!("events: {}", events.len());
    println!("slot_reuse_violations: {}", reuse.len());
    for v in reuse.iter().take(10) {
        println!("  violation at seq {}: bucket {} slot {}", v.seq, v.bucket, v.slot);
    }
    match observer::leaf_uniformity_test(&events, &cfg.geometry) {
        Uniformity::Tested(t) => {
            println!("leaf_uniformity_stat: {:.3}", t.statistic);
            println!("leaf_uniformity_p: {:.6}", t.p_value);
        }
        Uniformity::Inconclusive { samples, needed } => {
            println!("leaf_uniformity: inconclusive ({samples} of {needed} samples)");
        }
    }
    if !reuse.is_empty() {
        return Err(format!("{} slot reuse violations", reuse.len()));
    }
    Ok(())
}

fn cmd_serve_storage(flags: &Flags) -> Result<(), String> {
    let listen = flags.get("listen").unwrap_or("127.0.0.1:4970").to_string();
    let observer = Arc::new(Observer::new());
    let server = match flags.get("dir") {
        Some(dir) => StorageServer::open_disk(dir.into(), observer).map_err(|e| e.to_string())?,
        None => StorageServer::new(observer),
    };
    if let Some(path) = flags.get("attack-script") {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{path}: {e}"))?;
        let attacks = Attack::parse_script(&text).map_err(|e| e.to_string())?;
        println!("malicious mode: {} scripted attacks", attacks.len());
        server.script_attacks(attacks);
    }
    let handle = transport::serve(listen.as_str(), Arc::new(server)).map_err(|e| e.to_string())?;
    println!("storage server on {}", handle.local_addr);
    loop {
        std::thread::sleep(std::time::Duration::from_secs(3600));
    }
}

fn cmd_recover(flags: &Flags) -> Result<(), String> {
    let cfg = load_config(flags)?;
    let seed: u64 = flags.num("seed", 1)?;
    let counter_path = flags.get("counter-file").ok_or("--counter-file FILE is required")?;
    let counter = TrustedCounter::open(counter_path.into()).map_err(|e| e.to_string())?;
    let observer = Arc::new(Observer::new());
    let store: Arc<dyn StorageClient> = match (flags.get("dir"), flags.get("storage")) {
        (Some(dir), _) => {
            let server = StorageServer::open_disk(dir.into(), observer.clone())
                .map_err(|e| e.to_string())?;
            Arc::new(InProcess(Arc::new(server)))
        }
        (None, Some(addr)) => {
            let addr = addr.strip_prefix("tcp:").unwrap_or(addr);
            Arc::new(TcpClient::connect(addr).map_err(|e| e.to_string())?)
        }
        (None, None) => return Err("one of --dir or --storage is required".into()),
    };
    let keys = KeyMaterial::from_seed(seed);
    let proxy = Proxy::recover(
        cfg,
        keys,
        store,
        observer,
        counter,
        Box::new(veilkv::proxy::NoCrashes),
    )
    .map_err(|e| match e {
        Error::Integrity(msg) => format!("INTEGRITY ALARM: {msg}"),
        other => other.to_string(),
    })?;
    println!("recovered to committed epoch {}", proxy.committed_epoch());
    println!("next epoch: {}", proxy.epoch());
    Ok(())
}
