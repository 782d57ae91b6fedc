//! Deployment parameters: ORAM tree geometry, epoch/batch shape, and
//! system-wide knobs, plus the `key = value` config-file format used by the
//! CLI.
//!
//! The config file accepts the canonical parameter names: `n` (object
//! capacity), `z` (real slots per bucket), `s` (dummy slots per bucket),
//! `a` (accesses per eviction), `l` (tree levels below the root), `r` (read
//! batches per epoch), `b_read`, `b_write` (batch sizes) and `delta` (ticks
//! between read batches), along with `block_size`, `stash_bound`,
//! `full_checkpoint_every`, `gc_windows`, `workers` and `integrity`.

use crate::error::{Error, Result};

/// Shape of the ORAM tree and its eviction cadence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreeGeometry {
    /// Number of levels below the root; the tree has `levels + 1` levels in
    /// total and `2^levels` leaves.
    pub levels: u32,
    /// Real (data-bearing) slots per bucket.
    pub real_slots: usize,
    /// Dummy slots per bucket.
    pub dummy_slots: usize,
    /// One eviction fires every `evict_period` logical accesses.
    pub evict_period: u64,
    /// Maximum number of distinct logical objects.
    pub capacity: u64,
}

impl TreeGeometry {
    pub fn bucket_count(&self) -> usize {
        (1usize << (self.levels + 1)) - 1
    }

    pub fn leaf_count(&self) -> u64 {
        1u64 << self.levels
    }

    pub fn slots_per_bucket(&self) -> usize {
        self.real_slots + self.dummy_slots
    }

    /// Bucket id at `depth` (0 = root) on the path to `leaf`.
    pub fn path_bucket(&self, leaf: u64, depth: u32) -> u32 {
        debug_assert!(leaf < self.leaf_count());
        debug_assert!(depth <= self.levels);
        ((1u64 << depth) - 1 + (leaf >> (self.levels - depth))) as u32
    }

    /// Buckets on the root-to-leaf path, root first.
    pub fn path(&self, leaf: u64) -> Vec<u32> {
        (0..=self.levels).map(|d| self.path_bucket(leaf, d)).collect()
    }

    /// Depth of a bucket id (0 = root).
    pub fn depth_of(&self, bucket: u32) -> u32 {
        (u64::BITS - 1) - (bucket as u64 + 1).leading_zeros()
    }

    /// Whether `bucket` lies on the path to `leaf`.
    pub fn on_path(&self, bucket: u32, leaf: u64) -> bool {
        let depth = self.depth_of(bucket);
        self.path_bucket(leaf, depth) == bucket
    }

    /// Target leaf of the `n`-th eviction (0-based), in reverse-lexicographic
    /// (bit-reversed counter) order so consecutive evictions spread across
    /// subtrees.
    pub fn evict_target(&self, n: u64) -> u64 {
        if self.levels == 0 {
            return 0;
        }
        (n % self.leaf_count()).reverse_bits() >> (64 - self.levels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.levels > 24 {
            return Err(Error::Config(format!("levels must be in 1..=24, got {}", self.levels)));
        }
        if self.real_slots == 0 {
            return Err(Error::Config("real_slots must be positive".into()));
        }
        if self.dummy_slots == 0 {
            return Err(Error::Config("dummy_slots must be positive".into()));
        }
        if self.evict_period == 0 {
            return Err(Error::Config("evict_period must be positive".into()));
        }
        // Leaf-level capacity, leaving the interior as eviction headroom.
        let max_objects = self.real_slots as u64 * self.leaf_count();
        if self.capacity > max_objects {
            return Err(Error::Config(format!(
                "capacity {} exceeds tree capacity {} (real_slots * leaves)",
                self.capacity, max_objects
            )));
        }
        Ok(())
    }
}

/// Epoch structure: a fixed number of fixed-size read batches at fixed
/// intervals, followed by one fixed-size write batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpochShape {
    /// Read batches per epoch.
    pub read_batches: usize,
    /// Slots per read batch.
    pub read_batch_size: usize,
    /// Slots in the epoch's single write batch.
    pub write_batch_size: usize,
    /// Logical ticks between consecutive read batches.
    pub batch_interval: u64,
}

impl EpochShape {
    /// Logical accesses (and therefore evict-counter increments) per epoch.
    pub fn accesses_per_epoch(&self) -> u64 {
        (self.read_batches * self.read_batch_size + self.write_batch_size) as u64
    }

    pub fn validate(&self) -> Result<()> {
        if self.read_batches == 0 || self.read_batch_size == 0 || self.write_batch_size == 0 {
            return Err(Error::Config("epoch shape fields must all be positive".into()));
        }
        if self.batch_interval == 0 {
            return Err(Error::Config("batch_interval must be positive".into()));
        }
        Ok(())
    }
}

/// Integrity posture toward the storage server.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntegrityMode {
    /// Honest-but-curious server: envelopes carry no verified tag.
    Honest,
    /// Potentially malicious server: every envelope is MAC-verified against
    /// its freshness id.
    Sealed,
}

/// Full system configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SystemConfig {
    pub geometry: TreeGeometry,
    pub epoch: EpochShape,
    /// Fixed plaintext block size in bytes; every tree envelope has the same
    /// sealed length.
    pub block_size: usize,
    /// Stash occupancy bound used for checkpoint padding. Exceeding it is a
    /// hard configuration error surfaced at checkpoint time.
    pub stash_bound: usize,
    /// A full (non-delta) checkpoint is written every this many epochs.
    pub full_checkpoint_every: u64,
    /// Old bucket versions are retained for this many full-checkpoint windows.
    pub gc_windows: u64,
    /// Worker threads for parallel physical execution. 1 keeps runs
    /// bit-deterministic including trace order.
    pub workers: usize,
    pub integrity: IntegrityMode,
}

impl SystemConfig {
    /// Desk-scale default: small tree, small epochs, sealed envelopes.
    pub fn desk_default() -> Self {
        SystemConfig {
            geometry: TreeGeometry {
                levels: 7,
                real_slots: 4,
                dummy_slots: 6,
                evict_period: 3,
                capacity: 512,
            },
            epoch: EpochShape {
                read_batches: 4,
                read_batch_size: 15,
                write_batch_size: 15,
                batch_interval: 4,
            },
            block_size: 256,
            stash_bound: 96,
            full_checkpoint_every: 8,
            gc_windows: 2,
            workers: 1,
            integrity: IntegrityMode::Sealed,
        }
    }

    /// Maximum position-map entries that can change in one epoch: every real
    /// read plus every real write remaps one key.
    pub fn position_delta_slots(&self) -> usize {
        self.epoch.read_batches * self.epoch.read_batch_size + self.epoch.write_batch_size
    }

    /// Evictions fired per epoch. Epoch accesses must be a multiple of the
    /// eviction period so every epoch ends exactly on an eviction boundary.
    pub fn evictions_per_epoch(&self) -> u64 {
        self.epoch.accesses_per_epoch() / self.geometry.evict_period
    }

    /// Maximum buckets rewritten in one epoch (bounds the permutation-map
    /// delta): distinct buckets on the epoch's evict paths plus reshuffle
    /// headroom of one bucket per scheduled path read.
    pub fn permutation_delta_slots(&self) -> usize {
        let per_level = self.geometry.bucket_count();
        let evict_touched =
            (self.evictions_per_epoch() as usize).saturating_mul(self.geometry.levels as usize + 1);
        let reshuffle_headroom = self.epoch.read_batches * self.epoch.read_batch_size;
        per_level.min(evict_touched) + reshuffle_headroom
    }

    /// Maximum slots invalidated by one epoch's read batches.
    pub fn valid_delta_slots(&self) -> usize {
        self.epoch.read_batches
            * self.epoch.read_batch_size
            * (self.geometry.levels as usize + 1)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.epoch.validate()?;
        if self.block_size < crate::crypto::BLOCK_HEADER_LEN + 1 {
            return Err(Error::Config(format!(
                "block_size must be at least {}",
                crate::crypto::BLOCK_HEADER_LEN + 1
            )));
        }
        if self.stash_bound == 0 {
            return Err(Error::Config("stash_bound must be positive".into()));
        }
        if self.full_checkpoint_every == 0 || self.gc_windows == 0 {
            return Err(Error::Config("checkpoint/gc cadence must be positive".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be positive".into()));
        }
        if !self.epoch.accesses_per_epoch().is_multiple_of(self.geometry.evict_period) {
            return Err(Error::Config(format!(
                "epoch accesses ({}) must be a multiple of evict_period ({})",
                self.epoch.accesses_per_epoch(),
                self.geometry.evict_period
            )));
        }
        Ok(())
    }

    /// Parse the `key = value` config-file format. Unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::desk_default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let key = key.trim().to_ascii_lowercase();
            let value = value.trim();
            let num = |v: &str| -> Result<u64> {
                v.parse::<u64>()
                    .map_err(|_| Error::Config(format!("line {}: bad number {v:?}", lineno + 1)))
            };
            match key.as_str() {
                "n" => cfg.geometry.capacity = num(value)?,
                "z" => cfg.geometry.real_slots = num(value)? as usize,
                "s" => cfg.geometry.dummy_slots = num(value)? as usize,
                "a" => cfg.geometry.evict_period = num(value)?,
                "l" => cfg.geometry.levels = num(value)? as u32,
                "r" => cfg.epoch.read_batches = num(value)? as usize,
                "b_read" => cfg.epoch.read_batch_size = num(value)? as usize,
                "b_write" => cfg.epoch.write_batch_size = num(value)? as usize,
                "delta" => cfg.epoch.batch_interval = num(value)?,
                "block_size" => cfg.block_size = num(value)? as usize,
                "stash_bound" => cfg.stash_bound = num(value)? as usize,
                "full_checkpoint_every" => cfg.full_checkpoint_every = num(value)?,
                "gc_windows" => cfg.gc_windows = num(value)?,
                "workers" => cfg.workers = num(value)? as usize,
                "integrity" => {
                    cfg.integrity = match value {
                        "sealed" => IntegrityMode::Sealed,
                        "honest" => IntegrityMode::Honest,
                        other => {
                            return Err(Error::Config(format!(
                                "line {}: integrity must be sealed|honest, got {other:?}",
                                lineno + 1
                            )))
                        }
                    }
                }
                other => {
                    return Err(Error::Config(format!("line {}: unknown key {other:?}", lineno + 1)))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn render(&self) -> String {
        format!(
            "n = {}\nz = {}\ns = {}\na = {}\nl = {}\nr = {}\nb_read = {}\nb_write = {}\ndelta = {}\n\
             block_size = {}\nstash_bound = {}\nfull_checkpoint_every = {}\ngc_windows = {}\n\
             workers = {}\nintegrity = {}\n",
            self.geometry.capacity,
            self.geometry.real_slots,
            self.geometry.dummy_slots,
            self.geometry.evict_period,
            self.geometry.levels,
            self.epoch.read_batches,
            self.epoch.read_batch_size,
            self.epoch.write_batch_size,
            self.epoch.batch_interval,
            self.block_size,
            self.stash_bound,
            self.full_checkpoint_every,
            self.gc_windows,
            self.workers,
            match self.integrity {
                IntegrityMode::Sealed => "sealed",
                IntegrityMode::Honest => "honest",
            }
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_counts() {
        let g = TreeGeometry { levels: 2, real_slots: 1, dummy_slots: 2, evict_period: 3, capacity: 4 };
        assert_eq!(g.bucket_count(), 7);
        assert_eq!(g.leaf_count(), 4);
        assert_eq!(g.slots_per_bucket(), 3);
    }

    #[test]
    fn path_addressing() {
        let g = TreeGeometry { levels: 2, real_slots: 1, dummy_slots: 2, evict_period: 3, capacity: 4 };
        assert_eq!(g.path(0), vec![0, 1, 3]);
        assert_eq!(g.path(3), vec![0, 2, 6]);
        assert!(g.on_path(2, 3));
        assert!(!g.on_path(1, 3));
        assert_eq!(g.depth_of(0), 0);
        assert_eq!(g.depth_of(6), 2);
    }

    #[test]
    fn evict_order_is_bit_reversed() {
        let g = TreeGeometry { levels: 3, real_slots: 1, dummy_slots: 2, evict_period: 1, capacity: 8 };
        let order: Vec<u64> = (0..8).map(|n| g.evict_target(n)).collect();
        assert_eq!(order, vec![0, 4, 2, 6, 1, 5, 3, 7]);
        // Wraps around deterministically.
        assert_eq!(g.evict_target(8), 0);
    }

    #[test]
    fn capacity_check_rejects_oversized() {
        let g = TreeGeometry { levels: 2, real_slots: 1, dummy_slots: 2, evict_period: 3, capacity: 5 };
        assert!(g.validate().is_err());
        let ok = TreeGeometry { capacity: 4, ..g };
        assert!(ok.validate().is_ok());
    }

    #[test]
    fn config_file_round_trip() {
        let cfg = SystemConfig::desk_default();
        let parsed = SystemConfig::parse(&cfg.render()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn config_rejects_unknown_key() {
        assert!(SystemConfig::parse("zz = 3\n").is_err());
    }

    #[test]
    fn epoch_must_align_with_evictions() {
        let mut cfg = SystemConfig::desk_default();
        cfg.epoch.write_batch_size += 1;
        assert!(cfg.validate().is_err());
    }
}
