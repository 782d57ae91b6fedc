//! An oblivious transactional key-value store.
//!
//! A trusted proxy runs a tree-based ORAM with per-bucket dummy slots and
//! deterministic eviction against an untrusted storage server, batches
//! multiversioned-timestamp-ordered transactions into fixed-shape epochs,
//! executes each epoch's physical operations as all-reads-then-all-writes
//! with deduplication, and recovers from proxy crashes without leaking
//! access patterns. An observer records the adversary's view and checks the
//! obliviousness, equivalence, and durability claims empirically.

pub mod bench;
pub mod config;
pub mod crypto;
pub mod durability;
pub mod error;
pub mod exec;
pub mod mvtso;
pub mod observer;
pub mod oram;
pub mod proxy;
pub mod sgraph;
pub mod stats;
pub mod storage;
pub mod transport;
pub mod wire;
pub mod workload;

pub use config::{EpochShape, IntegrityMode, SystemConfig, TreeGeometry};
pub use error::{Error, Result};
