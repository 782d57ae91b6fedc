//! Crate-wide error type.

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid deployment parameters or oversized payloads.
    #[error("config error: {0}")]
    Config(String),

    /// A MAC or freshness check failed: the storage server returned tampered,
    /// stale, or withheld data. Treated as denial of service.
    #[error("integrity violation: {0}")]
    Integrity(String),

    /// Malformed wire message or record.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// The requested logical key has never been written.
    #[error("key not found")]
    NotFound,

    /// Underlying I/O failure (network or disk storage mode).
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A crash was injected at a hook point; the proxy must be discarded and
    /// recovered.
    #[error("crash injected at hook {0:?}")]
    CrashInjected(crate::proxy::HookPoint),

    /// Internal invariant violation; indicates a proxy bug, never expected in
    /// a passing run.
    #[error("internal invariant violated: {0}")]
    Internal(String),
}
