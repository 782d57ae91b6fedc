//! Randomized encryption and MAC envelopes for every payload crossing the
//! proxy/storage boundary, plus the keyed derivation streams that make two
//! independent executions of the same logical history byte-identical.
//!
//! An envelope is `nonce (12) || ciphertext || tag (32)`. The ciphertext is a
//! ChaCha20 stream encryption under a fresh random nonce; the tag is
//! HMAC-SHA256 over `nonce || ciphertext || freshness id || associated data`.
//! The freshness id binds tree envelopes to `(bucket, slot, write_version)`
//! and recovery records to `(record kind, counter)`, so a replayed or
//! relocated envelope never verifies. In honest mode the tag bytes are zero
//! and verification is skipped; envelope lengths are unchanged.

use chacha20::cipher::{KeyIvInit, StreamCipher};
use chacha20::ChaCha20;
use hmac::{Hmac, Mac};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use sha2::Sha256;

use crate::error::{Error, Result};

type HmacSha256 = Hmac<Sha256>;

pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 32;
/// Fixed per-envelope overhead on top of the plaintext.
pub const ENVELOPE_OVERHEAD: usize = NONCE_LEN + TAG_LEN;

/// Plaintext block layout: marker byte, key, value length.
pub const BLOCK_HEADER_LEN: usize = 1 + 8 + 4;

/// Identifies exactly one write, so stale or relocated envelopes are
/// rejected. No two distinct writes ever share an id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FreshnessId {
    /// A tree slot: bound to the bucket coordinate, the physical slot index,
    /// and the bucket's logical write version.
    TreeSlot { bucket: u32, slot: u16, version: u64 },
    /// A recovery-unit record: bound to the record kind and its counter
    /// (read-batch counter for path logs, epoch counter for checkpoints).
    LogRecord { kind: u8, counter: u64 },
}

impl FreshnessId {
    fn encode(&self) -> [u8; 24] {
        let mut out = [0u8; 24];
        match *self {
            FreshnessId::TreeSlot { bucket, slot, version } => {
                out[0] = 0;
                out[1..5].copy_from_slice(&bucket.to_le_bytes());
                out[5..7].copy_from_slice(&slot.to_le_bytes());
                out[7..15].copy_from_slice(&version.to_le_bytes());
            }
            FreshnessId::LogRecord { kind, counter } => {
                out[0] = 1;
                out[1] = kind;
                out[2..10].copy_from_slice(&counter.to_le_bytes());
            }
        }
        out
    }
}

/// A sealed payload as stored on the untrusted server.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope(pub Vec<u8>);

impl Envelope {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Key material generated at proxy initialization. It lives only in proxy
/// memory and survives crashes, which is the one piece of state recovery
/// assumes.
#[derive(Clone)]
pub struct KeyMaterial {
    enc_key: [u8; 32],
    mac_key: [u8; 32],
    derive_key: [u8; 32],
}

impl KeyMaterial {
    pub fn generate(rng: &mut impl RngCore) -> Self {
        let mut enc_key = [0u8; 32];
        let mut mac_key = [0u8; 32];
        let mut derive_key = [0u8; 32];
        rng.fill_bytes(&mut enc_key);
        rng.fill_bytes(&mut mac_key);
        rng.fill_bytes(&mut derive_key);
        KeyMaterial { enc_key, mac_key, derive_key }
    }

    /// Deterministic keys from a test seed.
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Self::generate(&mut rng)
    }
}

/// Seals and opens envelopes. Stateless after construction; safe to share.
#[derive(Clone)]
pub struct Sealer {
    keys: KeyMaterial,
    verify: bool,
}

impl Sealer {
    pub fn new(keys: KeyMaterial, verify: bool) -> Self {
        Sealer { keys, verify }
    }

    pub fn sealed_len(plain_len: usize) -> usize {
        plain_len + ENVELOPE_OVERHEAD
    }

    fn tag(&self, nonce: &[u8], ct: &[u8], id: &FreshnessId, aad: &[u8]) -> [u8; TAG_LEN] {
        let mut mac = HmacSha256::new_from_slice(&self.keys.mac_key).expect("hmac accepts any key length");
        mac.update(nonce);
        mac.update(ct);
        mac.update(&id.encode());
        mac.update(&(aad.len() as u64).to_le_bytes());
        mac.update(aad);
        mac.finalize().into_bytes().into()
    }

    /// Seal `plaintext` under a fresh nonce drawn from `rng`, binding the tag
    /// to `id` and to `aad` (plaintext sections stored alongside the
    /// envelope). Two seals of the same plaintext produce distinct
    /// ciphertexts.
    pub fn seal_with_aad(
        &self,
        rng: &mut impl RngCore,
        plaintext: &[u8],
        id: &FreshnessId,
        aad: &[u8],
    ) -> Envelope {
        let mut nonce = [0u8; NONCE_LEN];
        rng.fill_bytes(&mut nonce);
        let mut out = Vec::with_capacity(Self::sealed_len(plaintext.len()));
        out.extend_from_slice(&nonce);
        out.extend_from_slice(plaintext);
        let mut cipher = ChaCha20::new(&self.keys.enc_key.into(), &nonce.into());
        cipher.apply_keystream(&mut out[NONCE_LEN..]);
        if self.verify {
            let tag = self.tag(&nonce, &out[NONCE_LEN..], id, aad);
            out.extend_from_slice(&tag);
        } else {
            out.extend_from_slice(&[0u8; TAG_LEN]);
        }
        Envelope(out)
    }

    pub fn seal(&self, rng: &mut impl RngCore, plaintext: &[u8], id: &FreshnessId) -> Envelope {
        self.seal_with_aad(rng, plaintext, id, &[])
    }

    /// Open an envelope, verifying the tag against the expected id and aad.
    /// Any bit flip, id mismatch, or stale version is rejected.
    pub fn open_with_aad(&self, env: &Envelope, id: &FreshnessId, aad: &[u8]) -> Result<Vec<u8>> {
        if env.0.len() < ENVELOPE_OVERHEAD {
            return Err(Error::Integrity("envelope shorter than overhead".into()));
        }
        let (nonce, rest) = env.0.split_at(NONCE_LEN);
        let (ct, tag) = rest.split_at(rest.len() - TAG_LEN);
        if self.verify {
            let expect = self.tag(nonce, ct, id, aad);
            // Not constant time; the proxy is trusted and the comparison
            // guards server responses, not secrets.
            if expect[..] != tag[..] {
                return Err(Error::Integrity(format!("tag mismatch for {id:?}")));
            }
        }
        let mut plain = ct.to_vec();
        let nonce_arr: [u8; NONCE_LEN] = nonce.try_into().expect("nonce length checked");
        let mut cipher = ChaCha20::new(&self.keys.enc_key.into(), &nonce_arr.into());
        cipher.apply_keystream(&mut plain);
        Ok(plain)
    }

    pub fn open(&self, env: &Envelope, id: &FreshnessId) -> Result<Vec<u8>> {
        self.open_with_aad(env, id, &[])
    }
}

// ---------------------------------------------------------------------------
// Fixed-size block encoding
// ---------------------------------------------------------------------------

/// Encode a real block: marker, key, value, zero padding to `block_size`.
pub fn encode_real_block(block_size: usize, key: u64, value: &[u8]) -> Result<Vec<u8>> {
    if value.len() + BLOCK_HEADER_LEN > block_size {
        return Err(Error::Config(format!(
            "value of {} bytes exceeds block capacity {}",
            value.len(),
            block_size - BLOCK_HEADER_LEN
        )));
    }
    let mut out = vec![0u8; block_size];
    out[0] = 1;
    out[1..9].copy_from_slice(&key.to_le_bytes());
    out[9..13].copy_from_slice(&(value.len() as u32).to_le_bytes());
    out[13..13 + value.len()].copy_from_slice(value);
    Ok(out)
}

/// Dummy blocks are all zeros; indistinguishability comes from the
/// randomized encryption, not the content.
pub fn dummy_block(block_size: usize) -> Vec<u8> {
    vec![0u8; block_size]
}

/// Decode a block; returns `None` for dummies, `(key, value)` for real ones.
pub fn decode_block(plain: &[u8]) -> Result<Option<(u64, Vec<u8>)>> {
    if plain.len() < BLOCK_HEADER_LEN {
        return Err(Error::Protocol("block shorter than header".into()));
    }
    match plain[0] {
        0 => Ok(None),
        1 => {
            let key = u64::from_le_bytes(plain[1..9].try_into().unwrap());
            let len = u32::from_le_bytes(plain[9..13].try_into().unwrap()) as usize;
            if BLOCK_HEADER_LEN + len > plain.len() {
                return Err(Error::Protocol("block value length out of range".into()));
            }
            Ok(Some((key, plain[13..13 + len].to_vec())))
        }
        other => Err(Error::Protocol(format!("unknown block marker {other}"))),
    }
}

// ---------------------------------------------------------------------------
// Keyed derivation streams
// ---------------------------------------------------------------------------

/// Domain-separated randomness derivation. Both the sequential reference ORAM
/// and the epoch pipeline draw their leaves, permutations and nonces from
/// these streams, so runs that perform the same logical history at different
/// physical granularity still produce byte-identical bucket contents.
#[derive(Debug, Clone, Copy)]
pub enum Derivation {
    /// Leaf assigned to `key` at its `nth` (re)mapping; 0 is initial placement.
    Remap { key: u64, nth: u64 },
    /// Slot permutation of `bucket` at logical write `version`.
    Permutation { bucket: u32, version: u64 },
    /// Envelope nonces for `bucket` at `version`.
    BucketNonces { bucket: u32, version: u64 },
    /// Leaf for a padded dummy read slot.
    DummyPath { epoch: u64, batch: u32, slot: u32 },
    /// Nonces for recovery-unit records.
    RecordNonce { kind: u8, counter: u64 },
}

impl Derivation {
    fn encode(&self) -> [u8; 32] {
        let mut out = [0u8; 32];
        match *self {
            Derivation::Remap { key, nth } => {
                out[0] = 1;
                out[1..9].copy_from_slice(&key.to_le_bytes());
                out[9..17].copy_from_slice(&nth.to_le_bytes());
            }
            Derivation::Permutation { bucket, version } => {
                out[0] = 2;
                out[1..5].copy_from_slice(&bucket.to_le_bytes());
                out[5..13].copy_from_slice(&version.to_le_bytes());
            }
            Derivation::BucketNonces { bucket, version } => {
                out[0] = 3;
                out[1..5].copy_from_slice(&bucket.to_le_bytes());
                out[5..13].copy_from_slice(&version.to_le_bytes());
            }
            Derivation::DummyPath { epoch, batch, slot } => {
                out[0] = 4;
                out[1..9].copy_from_slice(&epoch.to_le_bytes());
                out[9..13].copy_from_slice(&batch.to_le_bytes());
                out[13..17].copy_from_slice(&slot.to_le_bytes());
            }
            Derivation::RecordNonce { kind, counter } => {
                out[0] = 5;
                out[1] = kind;
                out[2..10].copy_from_slice(&counter.to_le_bytes());
            }
        }
        out
    }
}

impl KeyMaterial {
    /// A fresh deterministic RNG for the given derivation domain.
    pub fn derive_rng(&self, domain: Derivation) -> ChaCha12Rng {
        let mut mac = HmacSha256::new_from_slice(&self.derive_key).expect("hmac accepts any key length");
        mac.update(&domain.encode());
        let seed: [u8; 32] = mac.finalize().into_bytes().into();
        ChaCha12Rng::from_seed(seed)
    }

    pub fn derive_leaf(&self, domain: Derivation, leaf_count: u64) -> u64 {
        self.derive_rng(domain).gen_range(0..leaf_count)
    }

    /// Fisher-Yates permutation of `0..n` for a bucket write.
    pub fn derive_permutation(&self, bucket: u32, version: u64, n: usize) -> Vec<u16> {
        let mut rng = self.derive_rng(Derivation::Permutation { bucket, version });
        let mut perm: Vec<u16> = (0..n as u16).collect();
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        perm
    }
}
