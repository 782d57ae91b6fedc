//! The untrusted storage service: a versioned bucket store with shadow
//! paging, an append-only recovery log, and an optional malicious layer that
//! tampers with, replays, or withholds responses.
//!
//! The server never sees plaintext. Every response is a function of
//! coordinates, versions, and stored bytes; bucket writes create new
//! versions instead of updating in place, so any committed state within the
//! retention horizon can be reproduced by `rollback_to`.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Mutex;

use crate::crypto::Envelope;
use crate::error::{Error, Result};
use crate::observer::{EventKind, Observer, Origin};
use crate::wire::{BucketWrite, RecordKind};

/// One stored bucket version.
#[derive(Debug, Clone)]
struct StoredBucket {
    counter_tag: u64,
    slots: Vec<Envelope>,
}

#[derive(Debug, Default)]
struct BucketHistory {
    /// version -> contents; never updated in place.
    versions: BTreeMap<u64, StoredBucket>,
    /// Currently visible version; may be below the newest stored version
    /// only transiently during rollback.
    current: Option<u64>,
}

/// A scripted deviation from honest behavior. Directives are matched
/// against request arrival order and consumed once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Attack {
    /// Flip one bit in the response to the `nth` slot read (0-based).
    TamperRead { nth: u64 },
    /// Serve the previous version's slot for the `nth` slot read.
    ReplayRead { nth: u64 },
    /// Report the record as missing.
    WithholdLog { kind: RecordKind, counter: u64 },
    /// Flip one bit in the returned log record.
    TamperLog { kind: RecordKind, counter: u64 },
}

impl Attack {
    /// Parse one scripted directive, e.g. `tamper_read 5` or
    /// `withhold_log path_log 7`.
    pub fn parse(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let kind_of = |s: &str| -> Result<RecordKind> {
            Ok(match s {
                "path_log" => RecordKind::PathLog,
                "full_checkpoint" => RecordKind::FullCheckpoint,
                "delta_checkpoint" => RecordKind::DeltaCheckpoint,
                other => return Err(Error::Config(format!("unknown record kind {other:?}"))),
            })
        };
        let num = |s: &str| -> Result<u64> {
            s.parse().map_err(|_| Error::Config(format!("bad number {s:?} in attack script")))
        };
        match fields.as_slice() {
            ["tamper_read", n] => Ok(Attack::TamperRead { nth: num(n)? }),
            ["replay_read", n] => Ok(Attack::ReplayRead { nth: num(n)? }),
            ["withhold_log", k, c] => Ok(Attack::WithholdLog { kind: kind_of(k)?, counter: num(c)? }),
            ["tamper_log", k, c] => Ok(Attack::TamperLog { kind: kind_of(k)?, counter: num(c)? }),
            other => Err(Error::Config(format!("unparseable attack directive {other:?}"))),
        }
    }

    pub fn parse_script(text: &str) -> Result<Vec<Attack>> {
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(Attack::parse)
            .collect()
    }
}

#[derive(Debug, Default)]
struct ServerState {
    buckets: BTreeMap<u32, BucketHistory>,
    log: BTreeMap<(RecordKind, u64), Vec<u8>>,
    max_tag_seen: u64,
    reads_served: u64,
    attacks: Vec<Attack>,
    /// Read count when the current attack script was installed; attack
    /// indices are relative to it.
    attack_base: u64,
    disk: Option<DiskBackend>,
}

/// In-memory storage server, optionally spilled to disk. Shared behind an
/// `Arc`; all methods take `&self`.
pub struct StorageServer {
    state: Mutex<ServerState>,
    observer: std::sync::Arc<Observer>,
}

impl StorageServer {
    pub fn new(observer: std::sync::Arc<Observer>) -> Self {
        StorageServer { state: Mutex::new(ServerState::default()), observer }
    }

    /// Open or create an on-disk server rooted at `dir`. Layout: one file per
    /// bucket version under `buckets/`, one per log record under `log/`.
    pub fn open_disk(dir: PathBuf, observer: std::sync::Arc<Observer>) -> Result<Self> {
        let backend = DiskBackend::open(dir)?;
        let mut state = ServerState::default();
        backend.load(&mut state)?;
        state.disk = Some(backend);
        Ok(StorageServer { state: Mutex::new(state), observer })
    }

    pub fn script_attacks(&self, attacks: Vec<Attack>) {
        let mut state = self.state.lock().unwrap();
        state.attack_base = state.reads_served;
        state.attacks = attacks;
    }

    fn take_attack(state: &mut ServerState, matcher: impl Fn(&Attack) -> bool) -> Option<Attack> {
        let idx = state.attacks.iter().position(matcher)?;
        Some(state.attacks.remove(idx))
    }

    pub fn read_slot(&self, bucket: u32, slot: u16) -> Result<(u64, Envelope)> {
        let mut state = self.state.lock().unwrap();
        let nth = state.reads_served - state.attack_base;
        state.reads_served += 1;
        let (current, mut envelope, previous) = {
            let history = state
                .buckets
                .get(&bucket)
                .ok_or_else(|| Error::Protocol(format!("unknown bucket {bucket}")))?;
            let current = history
                .current
                .ok_or_else(|| Error::Protocol(format!("bucket {bucket} has no visible version")))?;
            let stored = &history.versions[&current];
            if (slot as usize) >= stored.slots.len() {
                return Err(Error::Protocol(format!("slot {slot} out of range for bucket {bucket}")));
            }
            let previous = history
                .versions
                .range(..current)
                .next_back()
                .map(|(&v, s)| (v, s.slots[slot as usize].clone()));
            (current, stored.slots[slot as usize].clone(), previous)
        };
        let mut version = current;

        if let Some(attack) = Self::take_attack(&mut state, |a| {
            matches!(a, Attack::TamperRead { nth: n } | Attack::ReplayRead { nth: n } if *n == nth)
        }) {
            match attack {
                Attack::TamperRead { .. } => {
                    if let Some(b) = envelope.0.first_mut() {
                        *b ^= 0x01;
                    }
                }
                Attack::ReplayRead { .. } => {
                    if let Some((prev_version, prev_envelope)) = previous {
                        version = prev_version;
                        envelope = prev_envelope;
                    }
                }
                _ => unreachable!(),
            }
        }

        self.observer.record(
            EventKind::SlotRead,
            Origin::None,
            bucket,
            slot,
            version,
            0,
            envelope.len(),
            false,
        );
        Ok((version, envelope))
    }

    pub fn write_bucket(&self, write: BucketWrite) -> Result<()> {
        let mut state = self.state.lock().unwrap();
        let total_len: usize = write.slots.iter().map(Envelope::len).sum();
        let history = state.buckets.entry(write.bucket).or_default();
        if let Some(current) = history.current {
            if write.version <= current {
                return Err(Error::Protocol(format!(
                    "bucket {} write version {} not above current {}",
                    write.bucket, write.version, current
                )));
            }
            // Versions beyond current are rolled-back garbage from an
            // aborted epoch; shadow paging discards them on reuse.
            let stale: Vec<u64> = history.versions.range(write.version..).map(|(&v, _)| v).collect();
            for v in stale {
                history.versions.remove(&v);
            }
        }
        history
            .versions
            .insert(write.version, StoredBucket { counter_tag: write.counter_tag, slots: write.slots.clone() });
        history.current = Some(write.version);
        state.max_tag_seen = state.max_tag_seen.max(write.counter_tag);
        if let Some(disk) = &state.disk {
            disk.persist_bucket(&write)?;
        }
        self.observer.record(
            EventKind::BucketWrite,
            Origin::None,
            write.bucket,
            0,
            write.version,
            0,
            total_len,
            false,
        );
        Ok(())
    }

    /// Reset every bucket's visible version to its newest version whose
    /// counter tag is at or below `counter`, discarding later versions.
    pub fn rollback_to(&self, counter: u64) -> Result<()> {
        let mut state = self.state.lock().unwrap();
        if counter > state.max_tag_seen {
            return Err(Error::Protocol(format!(
                "rollback counter {counter} beyond horizon {}",
                state.max_tag_seen
            )));
        }
        let mut dropped: Vec<(u32, u64)> = Vec::new();
        for (&bucket, history) in state.buckets.iter_mut() {
            let keep: Option<u64> = history
                .versions
                .iter()
                .filter(|(_, s)| s.counter_tag <= counter)
                .map(|(&v, _)| v)
                .next_back();
            let drop: Vec<u64> = history
                .versions
                .iter()
                .filter(|(_, s)| s.counter_tag > counter)
                .map(|(&v, _)| v)
                .collect();
            for v in drop {
                history.versions.remove(&v);
                dropped.push((bucket, v));
            }
            history.current = keep;
        }
        if let Some(disk) = &state.disk {
            for (bucket, version) in &dropped {
                disk.remove_bucket(*bucket, *version)?;
            }
        }
        self.observer.record(EventKind::Rollback, Origin::None, 0, 0, counter, 0, 0, false);
        Ok(())
    }

    /// Drop versions with a counter tag below `keep_from`, except each
    /// bucket's currently visible version.
    pub fn gc(&self, keep_from: u64) -> Result<()> {
        let mut state = self.state.lock().unwrap();
        let mut dropped: Vec<(u32, u64)> = Vec::new();
        for (&bucket, history) in state.buckets.iter_mut() {
            let current = history.current;
            let drop: Vec<u64> = history
                .versions
                .iter()
                .filter(|(&v, s)| s.counter_tag < keep_from && Some(v) != current)
                .map(|(&v, _)| v)
                .collect();
            for v in drop {
                history.versions.remove(&v);
                dropped.push((bucket, v));
            }
        }
        if let Some(disk) = &state.disk {
            for (bucket, version) in &dropped {
                disk.remove_bucket(*bucket, *version)?;
            }
        }
        Ok(())
    }

    /// Append-only: re-appending the identical payload is idempotent,
    /// appending different bytes under an existing id is a protocol error.
    pub fn log_append(&self, kind: RecordKind, counter: u64, payload: Vec<u8>) -> Result<()> {
        let mut state = self.state.lock().unwrap();
        let len = payload.len();
        match state.log.get(&(kind, counter)) {
            Some(existing) if *existing != payload => {
                return Err(Error::Protocol(format!(
                    "log record {kind:?}/{counter} already exists with different contents"
                )));
            }
            Some(_) => {}
            None => {
                if let Some(disk) = &state.disk {
                    disk.persist_log(kind, counter, &payload)?;
                }
                state.log.insert((kind, counter), payload);
            }
        }
        self.observer.record(EventKind::LogAppend, Origin::None, 0, kind as u8 as u16, counter, 0, len, false);
        Ok(())
    }

    pub fn log_read(&self, kind: RecordKind, counter: u64) -> Result<Option<Vec<u8>>> {
        let mut state = self.state.lock().unwrap();
        if Self::take_attack(&mut state, |a| {
            matches!(a, Attack::WithholdLog { kind: k, counter: c } if *k == kind && *c == counter)
        })
        .is_some()
        {
            self.observer.record(EventKind::LogRead, Origin::None, 0, 0, counter, 0, 0, false);
            return Ok(None);
        }
        let mut payload = state.log.get(&(kind, counter)).cloned();
        if Self::take_attack(&mut state, |a| {
            matches!(a, Attack::TamperLog { kind: k, counter: c } if *k == kind && *c == counter)
        })
        .is_some()
        {
            if let Some(p) = payload.as_mut() {
                if let Some(b) = p.first_mut() {
                    *b ^= 0x01;
                }
            }
        }
        let len = payload.as_ref().map(Vec::len).unwrap_or(0);
        self.observer.record(EventKind::LogRead, Origin::None, 0, 0, counter, 0, len, false);
        Ok(payload)
    }

    /// Current visible version of every bucket, for test snapshots.
    pub fn current_versions(&self) -> BTreeMap<u32, u64> {
        let state = self.state.lock().unwrap();
        state
            .buckets
            .iter()
            .filter_map(|(&b, h)| h.current.map(|v| (b, v)))
            .collect()
    }

    /// Full byte image of every bucket's visible contents, for state
    /// comparisons in tests.
    pub fn tree_image(&self) -> BTreeMap<u32, (u64, Vec<Vec<u8>>)> {
        let state = self.state.lock().unwrap();
        state
            .buckets
            .iter()
            .filter_map(|(&b, h)| {
                h.current.map(|v| {
                    let slots = h.versions[&v].slots.iter().map(|e| e.0.clone()).collect();
                    (b, (v, slots))
                })
            })
            .collect()
    }

    /// Stored version count per bucket, for GC tests.
    pub fn version_count(&self, bucket: u32) -> usize {
        let state = self.state.lock().unwrap();
        state.buckets.get(&bucket).map(|h| h.versions.len()).unwrap_or(0)
    }

    /// Read the slots of an explicit stored version, for shadow-paging tests.
    pub fn read_version(&self, bucket: u32, version: u64) -> Option<Vec<Vec<u8>>> {
        let state = self.state.lock().unwrap();
        state
            .buckets
            .get(&bucket)
            .and_then(|h| h.versions.get(&version))
            .map(|s| s.slots.iter().map(|e| e.0.clone()).collect())
    }
}

// ---------------------------------------------------------------------------
// Disk backend
// ---------------------------------------------------------------------------

#[derive(Debug)]
struct DiskBackend {
    root: PathBuf,
}

impl DiskBackend {
    fn open(root: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(root.join("buckets"))?;
        std::fs::create_dir_all(root.join("log"))?;
        Ok(DiskBackend { root })
    }

    fn bucket_path(&self, bucket: u32, version: u64) -> PathBuf {
        self.root.join("buckets").join(format!("{bucket:08}_{version:016}.bin"))
    }

    fn log_path(&self, kind: RecordKind, counter: u64) -> PathBuf {
        self.root.join("log").join(format!("{:02}_{counter:016}.bin", kind as u8))
    }

    fn persist_bucket(&self, write: &BucketWrite) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&write.counter_tag.to_le_bytes());
        buf.extend_from_slice(&(write.slots.len() as u32).to_le_bytes());
        for slot in &write.slots {
            buf.extend_from_slice(&(slot.0.len() as u32).to_le_bytes());
            buf.extend_from_slice(&slot.0);
        }
        write_atomic(&self.bucket_path(write.bucket, write.version), &buf)
    }

    fn remove_bucket(&self, bucket: u32, version: u64) -> Result<()> {
        let path = self.bucket_path(bucket, version);
        if path.exists() {
            std::fs::remove_file(path)?;
        }
        Ok(())
    }

    fn persist_log(&self, kind: RecordKind, counter: u64, payload: &[u8]) -> Result<()> {
        write_atomic(&self.log_path(kind, counter), payload)
    }

    fn load(&self, state: &mut ServerState) -> Result<()> {
        for entry in std::fs::read_dir(self.root.join("buckets"))? {
            let entry = entry?;
            let name = entry.file_name().into_string().unwrap_or_default();
            let Some((bucket, version)) = name
                .strip_suffix(".bin")
                .and_then(|stem| stem.split_once('_'))
                .and_then(|(b, v)| Some((b.parse::<u32>().ok()?, v.parse::<u64>().ok()?)))
            else {
                continue;
            };
            let buf = std::fs::read(entry.path())?;
            if buf.len() < 12 {
                return Err(Error::Protocol(format!("corrupt bucket file {name}")));
            }
            let counter_tag = u64::from_le_bytes(buf[0..8].try_into().unwrap());
            let n = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
            let mut slots = Vec::with_capacity(n);
            let mut pos = 12;
            for _ in 0..n {
                if pos + 4 > buf.len() {
                    return Err(Error::Protocol(format!("corrupt bucket file {name}")));
                }
                let len = u32::from_le_bytes(buf[pos..pos + 4].try_into().unwrap()) as usize;
                pos += 4;
                if pos + len > buf.len() {
                    return Err(Error::Protocol(format!("corrupt bucket file {name}")));
                }
                slots.push(Envelope(buf[pos..pos + len].to_vec()));
                pos += len;
            }
            let history = state.buckets.entry(bucket).or_default();
            history.versions.insert(version, StoredBucket { counter_tag, slots });
            state.max_tag_seen = state.max_tag_seen.max(counter_tag);
        }
        for history in state.buckets.values_mut() {
            history.current = history.versions.keys().next_back().copied();
        }
        for entry in std::fs::read_dir(self.root.join("log"))? {
            let entry = entry?;
            let name = entry.file_name().into_string().unwrap_or_default();
            let Some((kind, counter)) = name
                .strip_suffix(".bin")
                .and_then(|stem| stem.split_once('_'))
                .and_then(|(k, c)| Some((k.parse::<u8>().ok()?, c.parse::<u64>().ok()?)))
            else {
                continue;
            };
            let kind = RecordKind::from_u8(kind)?;
            state.log.insert((kind, counter), std::fs::read(entry.path())?);
        }
        Ok(())
    }
}

fn write_atomic(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
