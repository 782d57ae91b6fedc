//! Epoch-granularity durability: the trusted counter, path logs, and
//! checkpoint records, all with constant per-class byte lengths.
//!
//! Record formats (stable; stored on the recovery unit as length-delimited
//! log payloads keyed by `(record kind, counter)`):
//!
//! * Path log (`kind 1`, counter = `epoch * (R + 1) + batch`): plaintext
//!   header `kind u8 || counter u64 || epoch u64 || batch u32`, then one
//!   envelope over `b_read` path entries (`leaf u64` or sentinel, then
//!   `levels + 1` slot indices, `u16::MAX` = no physical read) followed by a
//!   fixed number of extra entries (`bucket u32` or sentinel, `slot u16`)
//!   covering eviction and reshuffle read phases of the window. Batch index
//!   `R` is the write-phase log: all path entries are sentinels.
//! * Delta checkpoint (`kind 3`, counter = epoch): plaintext header
//!   `kind u8 || counter u64 || access_count u64 || evictions u64` and the
//!   plaintext valid-map delta (`bucket u32` or sentinel, `slot u16`),
//!   then one envelope over the padded position-map delta, rewritten-bucket
//!   entries, bucket cursor deltas, and the full stash (keys and block
//!   bytes, padded to the stash bound).
//! * Full checkpoint (`kind 2`, counter = epoch): plaintext header as
//!   above, then one envelope over every position (padded to capacity),
//!   every bucket's metadata including its physical validity bitmap, and
//!   the padded stash.
//!
//! Every envelope binds its plaintext sections as associated data, so a
//! tampered header or valid-map delta is rejected with the MAC. All
//! sections are padded with sentinels to configuration-determined constants
//! before encryption: record lengths never depend on epoch activity.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use crate::config::SystemConfig;
use crate::crypto::{Derivation, FreshnessId, KeyMaterial, Sealer};
use crate::error::{Error, Result};
use crate::oram::ObjectId;
use crate::wire::RecordKind;

const KEY_SENTINEL: u64 = u64::MAX;
const BUCKET_SENTINEL: u32 = u32::MAX;
pub const SLOT_SENTINEL: u16 = u16::MAX;
const LEAF_SENTINEL: u64 = u64::MAX;

/// Global path-log counter: one slot per read batch plus one for the
/// write-phase log.
pub fn batch_counter(cfg: &SystemConfig, committed_epoch: u64, batch: u32) -> u64 {
    committed_epoch * (cfg.epoch.read_batches as u64 + 1) + batch as u64
}

// ---------------------------------------------------------------------------
// Trusted counter
// ---------------------------------------------------------------------------

#[derive(Debug)]
struct CounterInner {
    committed_epoch: u64,
    batch: u32,
    path: Option<PathBuf>,
}

/// The crash-surviving epoch and read-batch counters. In-memory by default
/// (the test harness holds it across proxy incarnations); optionally backed
/// by a small local file updated with an atomic rename.
#[derive(Debug, Clone)]
pub struct TrustedCounter {
    inner: Arc<Mutex<CounterInner>>,
}

impl TrustedCounter {
    pub fn new_memory() -> Self {
        TrustedCounter {
            inner: Arc::new(Mutex::new(CounterInner { committed_epoch: 0, batch: 0, path: None })),
        }
    }

    pub fn open(path: PathBuf) -> Result<Self> {
        let (committed_epoch, batch) = if path.exists() {
            let text = std::fs::read_to_string(&path)?;
            let mut fields = text.split_whitespace();
            let e = fields
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Protocol("corrupt counter file".into()))?;
            let b = fields
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Protocol("corrupt counter file".into()))?;
            (e, b)
        } else {
            (0, 0)
        };
        let counter = TrustedCounter {
            inner: Arc::new(Mutex::new(CounterInner {
                committed_epoch,
                batch,
                path: Some(path),
            })),
        };
        counter.persist()?;
        Ok(counter)
    }

    fn persist(&self) -> Result<()> {
        let inner = self.inner.lock().unwrap();
        if let Some(path) = &inner.path {
            let tmp = path.with_extension("tmp");
            std::fs::write(&tmp, format!("{} {}\n", inner.committed_epoch, inner.batch))?;
            std::fs::rename(&tmp, path)?;
        }
        Ok(())
    }

    /// (committed epoch, batches claimed in the in-progress epoch).
    pub fn snapshot(&self) -> (u64, u32) {
        let inner = self.inner.lock().unwrap();
        (inner.committed_epoch, inner.batch)
    }

    /// Claim batch `batch` of the in-progress epoch; monotone.
    pub fn claim_batch(&self, batch: u32) -> Result<()> {
        {
            let mut inner = self.inner.lock().unwrap();
            if batch < inner.batch {
                return Err(Error::Internal(format!(
                    "batch counter would regress: {} -> {batch}",
                    inner.batch
                )));
            }
            inner.batch = batch;
        }
        self.persist()
    }

    /// Seal the in-progress epoch: the committed counter advances and the
    /// batch counter resets.
    pub fn advance_epoch(&self) -> Result<()> {
        {
            let mut inner = self.inner.lock().unwrap();
            inner.committed_epoch += 1;
            inner.batch = 0;
        }
        self.persist()
    }
}

// ---------------------------------------------------------------------------
// Byte helpers
// ---------------------------------------------------------------------------

struct Buf(Vec<u8>);

impl Buf {
    fn new() -> Self {
        Buf(Vec::new())
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, v: &[u8]) {
        self.0.extend_from_slice(v);
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Protocol("record truncated".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

// ---------------------------------------------------------------------------
// Path logs
// ---------------------------------------------------------------------------

/// One logical path read as logged before execution: the requested leaf and
/// the physical slot index read at each depth (`SLOT_SENTINEL` where the
/// batched executor served the bucket from its write buffer).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoggedPath {
    pub leaf: u64,
    pub slots: Vec<u16>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathLogRecord {
    pub epoch: u64,
    pub batch: u32,
    pub paths: Vec<LoggedPath>,
    /// Eviction/reshuffle read-phase coordinates of the window, in issue
    /// order.
    pub extras: Vec<(u32, u16)>,
}

/// Upper bound on extra (eviction/reshuffle) reads in one logged window.
pub fn path_log_extra_slots(cfg: &SystemConfig) -> usize {
    let path_len = cfg.geometry.levels as usize + 1;
    let per_bucket = cfg.geometry.slots_per_bucket();
    let window = cfg.epoch.read_batch_size.max(cfg.epoch.write_batch_size) as u64;
    let evictions = (window / cfg.geometry.evict_period + 1) as usize;
    let reshuffle_headroom = cfg.epoch.read_batch_size * path_len;
    let structural_max = cfg.geometry.bucket_count() * per_bucket;
    ((evictions * path_len + reshuffle_headroom) * per_bucket).min(structural_max)
}

/// Encodes and decodes durable records for one deployment configuration.
pub struct RecordCodec {
    cfg: SystemConfig,
    keys: KeyMaterial,
    sealer: Sealer,
}

impl RecordCodec {
    pub fn new(cfg: SystemConfig, keys: KeyMaterial, sealer: Sealer) -> Self {
        RecordCodec { cfg, keys, sealer }
    }

    pub fn encode_path_log(&self, counter: u64, record: &PathLogRecord) -> Result<Vec<u8>> {
        let path_len = self.cfg.geometry.levels as usize + 1;
        let max_paths = self.cfg.epoch.read_batch_size;
        let max_extras = path_log_extra_slots(&self.cfg);
        if record.paths.len() > max_paths {
            return Err(Error::Config(format!(
                "{} logged paths exceed the batch size {max_paths}",
                record.paths.len()
            )));
        }
        if record.extras.len() > max_extras {
            return Err(Error::Config(format!(
                "{} eviction reads exceed the log bound {max_extras}; raise dummy_slots or shrink batches",
                record.extras.len()
            )));
        }

        let mut plain = Buf::new();
        plain.u8(RecordKind::PathLog as u8);
        plain.u64(counter);
        plain.u64(record.epoch);
        plain.u32(record.batch);

        let mut body = Buf::new();
        for i in 0..max_paths {
            match record.paths.get(i) {
                Some(p) => {
                    if p.slots.len() != path_len {
                        return Err(Error::Internal("logged path has wrong depth".into()));
                    }
                    body.u64(p.leaf);
                    for &s in &p.slots {
                        body.u16(s);
                    }
                }
                None => {
                    body.u64(LEAF_SENTINEL);
                    for _ in 0..path_len {
                        body.u16(SLOT_SENTINEL);
                    }
                }
            }
        }
        for i in 0..max_extras {
            match record.extras.get(i) {
                Some(&(bucket, slot)) => {
                    body.u32(bucket);
                    body.u16(slot);
                }
                None => {
                    body.u32(BUCKET_SENTINEL);
                    body.u16(0);
                }
            }
        }

        let id = FreshnessId::LogRecord { kind: RecordKind::PathLog as u8, counter };
        let mut rng = self
            .keys
            .derive_rng(Derivation::RecordNonce { kind: RecordKind::PathLog as u8, counter });
        let envelope = self.sealer.seal_with_aad(&mut rng, &body.0, &id, &plain.0);
        let mut out = plain.0;
        out.extend_from_slice(&envelope.0);
        Ok(out)
    }

    pub fn decode_path_log(&self, counter: u64, payload: &[u8]) -> Result<PathLogRecord> {
        let path_len = self.cfg.geometry.levels as usize + 1;
        let header_len = 1 + 8 + 8 + 4;
        if payload.len() < header_len {
            return Err(Error::Integrity("path log shorter than header".into()));
        }
        let (plain, env) = payload.split_at(header_len);
        let mut header = Cursor::new(plain);
        if header.u8()? != RecordKind::PathLog as u8 {
            return Err(Error::Integrity("path log kind mismatch".into()));
        }
        if header.u64()? != counter {
            return Err(Error::Integrity("path log counter mismatch".into()));
        }
        let epoch = header.u64()?;
        let batch = header.u32()?;

        let id = FreshnessId::LogRecord { kind: RecordKind::PathLog as u8, counter };
        let body = self
            .sealer
            .open_with_aad(&crate::crypto::Envelope(env.to_vec()), &id, plain)?;
        let mut cursor = Cursor::new(&body);
        let mut paths = Vec::new();
        for _ in 0..self.cfg.epoch.read_batch_size {
            let leaf = cursor.u64()?;
            let mut slots = Vec::with_capacity(path_len);
            for _ in 0..path_len {
                slots.push(cursor.u16()?);
            }
            if leaf != LEAF_SENTINEL {
                paths.push(LoggedPath { leaf, slots });
            }
        }
        let mut extras = Vec::new();
        for _ in 0..path_log_extra_slots(&self.cfg) {
            let bucket = cursor.u32()?;
            let slot = cursor.u16()?;
            if bucket != BUCKET_SENTINEL {
                extras.push((bucket, slot));
            }
        }
        Ok(PathLogRecord { epoch, batch, paths, extras })
    }

    // -----------------------------------------------------------------------
    // Checkpoints
    // -----------------------------------------------------------------------

    fn seal_record(&self, kind: RecordKind, counter: u64, plain: Vec<u8>, body: &[u8]) -> Vec<u8> {
        let id = FreshnessId::LogRecord { kind: kind as u8, counter };
        let mut rng =
            self.keys.derive_rng(Derivation::RecordNonce { kind: kind as u8, counter });
        let envelope = self.sealer.seal_with_aad(&mut rng, body, &id, &plain);
        let mut out = plain;
        out.extend_from_slice(&envelope.0);
        out
    }

    fn open_record<'a>(
        &self,
        kind: RecordKind,
        counter: u64,
        payload: &'a [u8],
        plain_len: usize,
    ) -> Result<(Cursor<'a>, Vec<u8>)> {
        if payload.len() < plain_len {
            return Err(Error::Integrity("record shorter than header".into()));
        }
        let (plain, env) = payload.split_at(plain_len);
        let mut header = Cursor::new(plain);
        if header.u8()? != kind as u8 {
            return Err(Error::Integrity("record kind mismatch".into()));
        }
        if header.u64()? != counter {
            return Err(Error::Integrity("record counter mismatch".into()));
        }
        let id = FreshnessId::LogRecord { kind: kind as u8, counter };
        let body = self
            .sealer
            .open_with_aad(&crate::crypto::Envelope(env.to_vec()), &id, plain)?;
        Ok((header, body))
    }

    fn write_positions(
        body: &mut Buf,
        entries: &[(ObjectId, u64, u64)],
        pad_to: usize,
    ) -> Result<()> {
        if entries.len() > pad_to {
            return Err(Error::Config(format!(
                "{} position entries exceed the record bound {pad_to}",
                entries.len()
            )));
        }
        for i in 0..pad_to {
            match entries.get(i) {
                Some(&(key, leaf, remaps)) => {
                    body.u64(key);
                    body.u64(leaf);
                    body.u64(remaps);
                }
                None => {
                    body.u64(KEY_SENTINEL);
                    body.u64(0);
                    body.u64(0);
                }
            }
        }
        Ok(())
    }

    fn read_positions(cursor: &mut Cursor, count: usize) -> Result<Vec<(ObjectId, u64, u64)>> {
        let mut out = Vec::new();
        for _ in 0..count {
            let key = cursor.u64()?;
            let leaf = cursor.u64()?;
            let remaps = cursor.u64()?;
            if key != KEY_SENTINEL {
                out.push((key, leaf, remaps));
            }
        }
        Ok(out)
    }

    fn write_roles(&self, body: &mut Buf, roles: &[Option<ObjectId>]) {
        for r in 0..self.cfg.geometry.real_slots {
            body.u64(roles.get(r).copied().flatten().unwrap_or(KEY_SENTINEL));
        }
    }

    fn read_roles(&self, cursor: &mut Cursor) -> Result<Vec<Option<ObjectId>>> {
        let mut roles = Vec::with_capacity(self.cfg.geometry.real_slots);
        for _ in 0..self.cfg.geometry.real_slots {
            let key = cursor.u64()?;
            roles.push(if key == KEY_SENTINEL { None } else { Some(key) });
        }
        Ok(roles)
    }

    fn write_stash(&self, body: &mut Buf, stash: &[(ObjectId, Vec<u8>)]) -> Result<()> {
        if stash.len() > self.cfg.stash_bound {
            return Err(Error::Config(format!(
                "stash of {} exceeds the configured bound {}; raise stash_bound",
                stash.len(),
                self.cfg.stash_bound
            )));
        }
        for i in 0..self.cfg.stash_bound {
            match stash.get(i) {
                Some((key, value)) => {
                    let block = crate::crypto::encode_real_block(self.cfg.block_size, *key, value)?;
                    body.u64(*key);
                    body.bytes(&block);
                }
                None => {
                    body.u64(KEY_SENTINEL);
                    body.bytes(&crate::crypto::dummy_block(self.cfg.block_size));
                }
            }
        }
        Ok(())
    }

    fn read_stash(&self, cursor: &mut Cursor) -> Result<BTreeMap<ObjectId, Vec<u8>>> {
        let mut out = BTreeMap::new();
        for _ in 0..self.cfg.stash_bound {
            let key = cursor.u64()?;
            let block = cursor.take(self.cfg.block_size)?;
            if key != KEY_SENTINEL {
                match crate::crypto::decode_block(block)? {
                    Some((k, value)) if k == key => {
                        out.insert(key, value);
                    }
                    _ => return Err(Error::Integrity("stash entry key mismatch".into())),
                }
            }
        }
        Ok(out)
    }

    pub fn encode_delta(&self, epoch: u64, delta: &DeltaCheckpoint) -> Result<Vec<u8>> {
        let mut plain = Buf::new();
        plain.u8(RecordKind::DeltaCheckpoint as u8);
        plain.u64(epoch);
        plain.u64(delta.access_count);
        plain.u64(delta.evictions_done);
        plain.u64(delta.next_timestamp);
        let valid_slots = self.cfg.valid_delta_slots();
        if delta.invalidated.len() > valid_slots {
            return Err(Error::Config(format!(
                "{} invalidations exceed the record bound {valid_slots}",
                delta.invalidated.len()
            )));
        }
        for i in 0..valid_slots {
            match delta.invalidated.get(i) {
                Some(&(bucket, slot)) => {
                    plain.u32(bucket);
                    plain.u16(slot);
                }
                None => {
                    plain.u32(BUCKET_SENTINEL);
                    plain.u16(0);
                }
            }
        }

        let mut body = Buf::new();
        Self::write_positions(&mut body, &delta.positions, self.cfg.position_delta_slots())?;
        let perm_slots = self.cfg.permutation_delta_slots();
        if delta.rewritten.len() > perm_slots {
            return Err(Error::Config(format!(
                "{} rewritten buckets exceed the record bound {perm_slots}",
                delta.rewritten.len()
            )));
        }
        for i in 0..perm_slots {
            match delta.rewritten.get(i) {
                Some(entry) => {
                    body.u32(entry.bucket);
                    body.u64(entry.version);
                    body.u16(entry.dummies_used);
                    self.write_roles(&mut body, &entry.roles);
                    for &p in &entry.perm {
                        body.u16(p);
                    }
                }
                None => {
                    body.u32(BUCKET_SENTINEL);
                    body.u64(0);
                    body.u16(0);
                    self.write_roles(&mut body, &[]);
                    for _ in 0..self.cfg.geometry.slots_per_bucket() {
                        body.u16(0);
                    }
                }
            }
        }
        let cursor_slots = self.cursor_delta_slots();
        if delta.cursors.len() > cursor_slots {
            return Err(Error::Config(format!(
                "{} cursor updates exceed the record bound {cursor_slots}",
                delta.cursors.len()
            )));
        }
        for i in 0..cursor_slots {
            match delta.cursors.get(i) {
                Some(entry) => {
                    body.u32(entry.bucket);
                    body.u16(entry.dummies_used);
                    self.write_roles(&mut body, &entry.roles);
                }
                None => {
                    body.u32(BUCKET_SENTINEL);
                    body.u16(0);
                    self.write_roles(&mut body, &[]);
                }
            }
        }
        self.write_stash(&mut body, &delta.stash)?;
        Ok(self.seal_record(RecordKind::DeltaCheckpoint, epoch, plain.0, &body.0))
    }

    /// Buckets that can change cursors or roles without being rewritten in
    /// one epoch: every scheduled path read touch plus one kill per write
    /// slot, capped by the bucket count.
    pub fn cursor_delta_slots(&self) -> usize {
        let touches = self.cfg.epoch.read_batches
            * self.cfg.epoch.read_batch_size
            * (self.cfg.geometry.levels as usize + 1)
            + self.cfg.epoch.write_batch_size;
        touches.min(self.cfg.geometry.bucket_count())
    }

    pub fn decode_delta(&self, epoch: u64, payload: &[u8]) -> Result<DeltaCheckpoint> {
        let valid_slots = self.cfg.valid_delta_slots();
        let plain_len = 1 + 8 + 8 + 8 + 8 + valid_slots * 6;
        let (mut header, body) =
            self.open_record(RecordKind::DeltaCheckpoint, epoch, payload, plain_len)?;
        let access_count = header.u64()?;
        let evictions_done = header.u64()?;
        let next_timestamp = header.u64()?;
        let mut invalidated = Vec::new();
        for _ in 0..valid_slots {
            let bucket = header.u32()?;
            let slot = header.u16()?;
            if bucket != BUCKET_SENTINEL {
                invalidated.push((bucket, slot));
            }
        }
        let mut cursor = Cursor::new(&body);
        let positions = Self::read_positions(&mut cursor, self.cfg.position_delta_slots())?;
        let mut rewritten = Vec::new();
        for _ in 0..self.cfg.permutation_delta_slots() {
            let bucket = cursor.u32()?;
            let version = cursor.u64()?;
            let dummies_used = cursor.u16()?;
            let roles = self.read_roles(&mut cursor)?;
            let mut perm = Vec::with_capacity(self.cfg.geometry.slots_per_bucket());
            for _ in 0..self.cfg.geometry.slots_per_bucket() {
                perm.push(cursor.u16()?);
            }
            if bucket != BUCKET_SENTINEL {
                rewritten.push(RewrittenBucket { bucket, version, dummies_used, roles, perm });
            }
        }
        let mut cursors = Vec::new();
        for _ in 0..self.cursor_delta_slots() {
            let bucket = cursor.u32()?;
            let dummies_used = cursor.u16()?;
            let roles = self.read_roles(&mut cursor)?;
            if bucket != BUCKET_SENTINEL {
                cursors.push(CursorUpdate { bucket, dummies_used, roles });
            }
        }
        let stash = self.read_stash(&mut cursor)?;
        Ok(DeltaCheckpoint {
            access_count,
            evictions_done,
            next_timestamp,
            invalidated,
            positions,
            rewritten,
            cursors,
            stash: stash.into_iter().collect(),
        })
    }

    pub fn encode_full(&self, epoch: u64, full: &FullCheckpoint) -> Result<Vec<u8>> {
        let mut plain = Buf::new();
        plain.u8(RecordKind::FullCheckpoint as u8);
        plain.u64(epoch);
        plain.u64(full.access_count);
        plain.u64(full.evictions_done);
        plain.u64(full.next_timestamp);

        let mut body = Buf::new();
        Self::write_positions(&mut body, &full.positions, self.cfg.geometry.capacity as usize)?;
        if full.buckets.len() != self.cfg.geometry.bucket_count() {
            return Err(Error::Internal("full checkpoint must cover every bucket".into()));
        }
        let bitmap_len = self.cfg.geometry.slots_per_bucket().div_ceil(8);
        for bucket in &full.buckets {
            body.u64(bucket.version);
            body.u16(bucket.dummies_used);
            self.write_roles(&mut body, &bucket.roles);
            for &p in &bucket.perm {
                body.u16(p);
            }
            let mut bitmap = vec![0u8; bitmap_len];
            for (i, &valid) in bucket.server_valid.iter().enumerate() {
                if valid {
                    bitmap[i / 8] |= 1 << (i % 8);
                }
            }
            body.bytes(&bitmap);
        }
        self.write_stash(&mut body, &full.stash)?;
        Ok(self.seal_record(RecordKind::FullCheckpoint, epoch, plain.0, &body.0))
    }

    pub fn decode_full(&self, epoch: u64, payload: &[u8]) -> Result<FullCheckpoint> {
        let plain_len = 1 + 8 + 8 + 8 + 8;
        let (mut header, body) =
            self.open_record(RecordKind::FullCheckpoint, epoch, payload, plain_len)?;
        let access_count = header.u64()?;
        let evictions_done = header.u64()?;
        let next_timestamp = header.u64()?;
        let mut cursor = Cursor::new(&body);
        let positions = Self::read_positions(&mut cursor, self.cfg.geometry.capacity as usize)?;
        let mut buckets = Vec::with_capacity(self.cfg.geometry.bucket_count());
        let bitmap_len = self.cfg.geometry.slots_per_bucket().div_ceil(8);
        for _ in 0..self.cfg.geometry.bucket_count() {
            let version = cursor.u64()?;
            let dummies_used = cursor.u16()?;
            let roles = self.read_roles(&mut cursor)?;
            let mut perm = Vec::with_capacity(self.cfg.geometry.slots_per_bucket());
            for _ in 0..self.cfg.geometry.slots_per_bucket() {
                perm.push(cursor.u16()?);
            }
            let bitmap = cursor.take(bitmap_len)?;
            let server_valid = (0..self.cfg.geometry.slots_per_bucket())
                .map(|i| bitmap[i / 8] & (1 << (i % 8)) != 0)
                .collect();
            buckets.push(FullBucket { version, dummies_used, roles, perm, server_valid });
        }
        let stash = self.read_stash(&mut cursor)?;
        Ok(FullCheckpoint {
            access_count,
            evictions_done,
            next_timestamp,
            positions,
            buckets,
            stash: stash.into_iter().collect(),
        })
    }
}

/// One rewritten bucket's end-of-epoch metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RewrittenBucket {
    pub bucket: u32,
    pub version: u64,
    pub dummies_used: u16,
    pub roles: Vec<Option<ObjectId>>,
    pub perm: Vec<u16>,
}

/// Cursor/role changes of a bucket that was touched but not rewritten.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CursorUpdate {
    pub bucket: u32,
    pub dummies_used: u16,
    pub roles: Vec<Option<ObjectId>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeltaCheckpoint {
    pub access_count: u64,
    pub evictions_done: u64,
    /// Transaction-timestamp high water; restored so post-recovery
    /// transactions never reuse a committed timestamp.
    pub next_timestamp: u64,
    /// Physical slots consumed this epoch in buckets that were not
    /// rewritten (plaintext section; public information).
    pub invalidated: Vec<(u32, u16)>,
    pub positions: Vec<(ObjectId, u64, u64)>,
    pub rewritten: Vec<RewrittenBucket>,
    pub cursors: Vec<CursorUpdate>,
    pub stash: Vec<(ObjectId, Vec<u8>)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FullBucket {
    pub version: u64,
    pub dummies_used: u16,
    pub roles: Vec<Option<ObjectId>>,
    pub perm: Vec<u16>,
    /// Physical validity of the server's copy.
    pub server_valid: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FullCheckpoint {
    pub access_count: u64,
    pub evictions_done: u64,
    pub next_timestamp: u64,
    pub positions: Vec<(ObjectId, u64, u64)>,
    pub buckets: Vec<FullBucket>,
    pub stash: Vec<(ObjectId, Vec<u8>)>,
}

impl FullCheckpoint {
    /// Apply one epoch's delta on top of this state.
    pub fn apply_delta(&mut self, delta: &DeltaCheckpoint) {
        self.access_count = delta.access_count;
        self.evictions_done = delta.evictions_done;
        self.next_timestamp = delta.next_timestamp;
        let mut positions: BTreeMap<ObjectId, (u64, u64)> = self
            .positions
            .iter()
            .map(|&(k, leaf, remaps)| (k, (leaf, remaps)))
            .collect();
        for &(k, leaf, remaps) in &delta.positions {
            positions.insert(k, (leaf, remaps));
        }
        self.positions = positions.into_iter().map(|(k, (l, r))| (k, l, r)).collect();
        for entry in &delta.rewritten {
            let b = &mut self.buckets[entry.bucket as usize];
            b.version = entry.version;
            b.dummies_used = entry.dummies_used;
            b.roles = entry.roles.clone();
            b.perm = entry.perm.clone();
            b.server_valid.fill(true);
        }
        for entry in &delta.cursors {
            let b = &mut self.buckets[entry.bucket as usize];
            b.dummies_used = entry.dummies_used;
            b.roles = entry.roles.clone();
        }
        for &(bucket, slot) in &delta.invalidated {
            self.buckets[bucket as usize].server_valid[slot as usize] = false;
        }
        self.stash = delta.stash.clone();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn codec() -> RecordCodec {
        let mut cfg = SystemConfig::desk_default();
        cfg.geometry.levels = 3;
        cfg.geometry.capacity = 16;
        cfg.epoch.read_batches = 2;
        cfg.epoch.read_batch_size = 4;
        cfg.epoch.write_batch_size = 4;
        cfg.block_size = 64;
        cfg.stash_bound = 8;
        cfg.validate().unwrap();
        let keys = KeyMaterial::from_seed(3);
        let sealer = Sealer::new(keys.clone(), true);
        RecordCodec::new(cfg, keys, sealer)
    }

    fn sample_log() -> PathLogRecord {
        PathLogRecord {
            epoch: 2,
            batch: 1,
            paths: vec![
                LoggedPath { leaf: 3, slots: vec![1, 2, SLOT_SENTINEL, 0] },
                LoggedPath { leaf: 7, slots: vec![0, 5, 2, 1] },
            ],
            extras: vec![(0, 3), (2, 1)],
        }
    }

    #[test]
    fn path_log_round_trips() {
        let c = codec();
        let bytes = c.encode_path_log(5, &sample_log()).unwrap();
        assert_eq!(c.decode_path_log(5, &bytes).unwrap(), sample_log());
    }

    #[test]
    fn path_log_length_is_activity_independent() {
        let c = codec();
        let empty = PathLogRecord { epoch: 2, batch: 0, paths: vec![], extras: vec![] };
        let full = sample_log();
        assert_eq!(
            c.encode_path_log(4, &empty).unwrap().len(),
            c.encode_path_log(5, &full).unwrap().len()
        );
    }

    #[test]
    fn path_log_rejects_wrong_counter_and_tampering() {
        let c = codec();
        let bytes = c.encode_path_log(5, &sample_log()).unwrap();
        assert!(matches!(c.decode_path_log(6, &bytes), Err(Error::Integrity(_))));
        let mut tampered = bytes.clone();
        *tampered.last_mut().unwrap() ^= 1;
        assert!(matches!(c.decode_path_log(5, &tampered), Err(Error::Integrity(_))));
        // Flipping a plaintext header byte must also fail the MAC.
        let mut tampered = bytes;
        tampered[9] ^= 1;
        assert!(c.decode_path_log(5, &tampered).is_err());
    }

    fn sample_delta() -> DeltaCheckpoint {
        DeltaCheckpoint {
            access_count: 24,
            evictions_done: 8,
            next_timestamp: 17,
            invalidated: vec![(1, 0), (4, 3)],
            positions: vec![(3, 5, 2), (9, 1, 7)],
            rewritten: vec![RewrittenBucket {
                bucket: 0,
                version: 9,
                dummies_used: 1,
                roles: vec![Some(3), None, Some(7), None],
                perm: (0..10).rev().collect(),
            }],
            cursors: vec![CursorUpdate {
                bucket: 5,
                dummies_used: 2,
                roles: vec![None, Some(4), None, None],
            }],
            stash: vec![(7, b"hello".to_vec())],
        }
    }

    #[test]
    fn delta_round_trips() {
        let c = codec();
        let bytes = c.encode_delta(3, &sample_delta()).unwrap();
        assert_eq!(c.decode_delta(3, &bytes).unwrap(), sample_delta());
    }

    #[test]
    fn checkpoint_lengths_constant() {
        let c = codec();
        let empty = DeltaCheckpoint {
            access_count: 24,
            evictions_done: 8,
            next_timestamp: 17,
            invalidated: vec![],
            positions: vec![],
            rewritten: vec![],
            cursors: vec![],
            stash: vec![],
        };
        assert_eq!(
            c.encode_delta(3, &empty).unwrap().len(),
            c.encode_delta(4, &sample_delta()).unwrap().len()
        );
    }

    fn sample_full(c: &RecordCodec) -> FullCheckpoint {
        let geometry = c.cfg.geometry;
        FullCheckpoint {
            access_count: 48,
            evictions_done: 16,
            next_timestamp: 23,
            positions: vec![(0, 1, 1), (5, 7, 3)],
            buckets: (0..geometry.bucket_count())
                .map(|i| FullBucket {
                    version: i as u64,
                    dummies_used: (i % 3) as u16,
                    roles: vec![None, Some(1), None, None],
                    perm: (0..geometry.slots_per_bucket() as u16).collect(),
                    server_valid: (0..geometry.slots_per_bucket()).map(|s| s % 2 == 0).collect(),
                })
                .collect(),
            stash: vec![(2, b"x".to_vec()), (4, b"yy".to_vec())],
        }
    }

    #[test]
    fn full_round_trips() {
        let c = codec();
        let full = sample_full(&c);
        let bytes = c.encode_full(6, &full).unwrap();
        assert_eq!(c.decode_full(6, &bytes).unwrap(), full);
    }

    #[test]
    fn delta_application_reconstructs_state() {
        let c = codec();
        let mut state = sample_full(&c);
        let delta = sample_delta();
        state.apply_delta(&delta);
        assert_eq!(state.access_count, 24);
        let b0 = &state.buckets[0];
        assert_eq!(b0.version, 9);
        assert!(b0.server_valid.iter().all(|&v| v));
        let b5 = &state.buckets[5];
        assert_eq!(b5.dummies_used, 2);
        // Invalidation applied after rewrites.
        assert!(!state.buckets[1].server_valid[0]);
        assert!(!state.buckets[4].server_valid[3]);
        assert_eq!(state.stash, vec![(7, b"hello".to_vec())]);
        let pos: BTreeMap<ObjectId, (u64, u64)> =
            state.positions.iter().map(|&(k, l, r)| (k, (l, r))).collect();
        assert_eq!(pos[&3], (5, 2));
        assert_eq!(pos[&9], (1, 7));
        assert_eq!(pos[&0], (1, 1));
    }

    #[test]
    fn counter_survives_reopen_and_is_monotone() {
        let dir = std::env::temp_dir().join(format!("veilkv-counter-{}", std::process::id()));
        let _ = std::fs::remove_file(&dir);
        let counter = TrustedCounter::open(dir.clone()).unwrap();
        counter.claim_batch(1).unwrap();
        counter.claim_batch(2).unwrap();
        assert!(counter.claim_batch(1).is_err());
        counter.advance_epoch().unwrap();
        assert_eq!(counter.snapshot(), (1, 0));
        drop(counter);
        let reopened = TrustedCounter::open(dir.clone()).unwrap();
        assert_eq!(reopened.snapshot(), (1, 0));
        let _ = std::fs::remove_file(&dir);
    }

    #[test]
    fn oversized_sections_rejected() {
        let c = codec();
        let mut delta = sample_delta();
        delta.stash = (0..9).map(|k| (k, vec![0u8])).collect();
        assert!(matches!(c.encode_delta(1, &delta), Err(Error::Config(_))));
    }
}
