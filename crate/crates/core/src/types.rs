//! Identifiers, configuration, client messages and batches shared by every
//! protocol component, plus the quorum arithmetic and round-to-queue mapping.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use sha2::{Digest as _, Sha256};
use thiserror::Error;

/// Transaction size used by the experiment harness unless overridden.
pub const DEFAULT_TX_SIZE: usize = 250;

/// Index of a replica in `[0, n)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ReplicaId(pub u32);

impl ReplicaId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ReplicaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}", self.0)
    }
}

/// A SHA-256 digest.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn of(bytes: &[u8]) -> Self {
        Digest(Sha256::digest(bytes).into())
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    /// XOR-combine, used for order-independent set fingerprints.
    pub fn xor(&self, other: &Digest) -> Digest {
        let mut out = [0u8; 32];
        for (o, (a, b)) in out.iter_mut().zip(self.0.iter().zip(other.0.iter())) {
            *o = a ^ b;
        }
        Digest(out)
    }

    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", &self.to_hex()[..12])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("n = {n} cannot tolerate f = {f} faults (need n >= 3f + 1)")]
    TooFewReplicas { n: usize, f: usize },
    #[error("batch size must be at least 1")]
    ZeroBatch,
}

/// Static system parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Config {
    pub n: usize,
    pub f: usize,
    pub batch_size: usize,
    pub tx_size: usize,
}

impl Config {
    pub fn new(n: usize, f: usize, batch_size: usize, tx_size: usize) -> Result<Self, ConfigError> {
        if n == 0 || n < 3 * f + 1 {
            return Err(ConfigError::TooFewReplicas { n, f });
        }
        if batch_size == 0 {
            return Err(ConfigError::ZeroBatch);
        }
        Ok(Config { n, f, batch_size, tx_size })
    }

    /// The reference configuration `n = 3f + 1`.
    pub fn reference(f: usize, batch_size: usize) -> Result<Self, ConfigError> {
        Config::new(3 * f + 1, f, batch_size, DEFAULT_TX_SIZE)
    }

    pub fn quorums(&self) -> Quorums {
        quorums(self)
    }

    pub fn replicas(&self) -> impl Iterator<Item = ReplicaId> {
        (0..self.n as u32).map(ReplicaId)
    }

    /// Number of echo shares needed for a VCBC proof: `ceil((n + f + 1) / 2)`,
    /// which is `2f + 1` when `n = 3f + 1`.
    pub fn vcbc_threshold(&self) -> usize {
        (self.n + self.f + 2) / 2
    }

    /// Number of coin shares needed to reveal a common coin.
    pub fn coin_threshold(&self) -> usize {
        self.f + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Quorums {
    /// `f + 1`: contains at least one correct replica.
    pub weak: usize,
    /// `2f + 1`.
    pub strong: usize,
    /// `n - f`: the most a replica can wait for.
    pub quorum: usize,
}

pub fn quorums(cfg: &Config) -> Quorums {
    Quorums { weak: cfg.f + 1, strong: 2 * cfg.f + 1, quorum: cfg.n - cfg.f }
}

/// Round-robin queue selection: agreement round `r` operates on the queue of
/// replica `r mod n`.
pub fn queue_map(round: u64, n: usize) -> ReplicaId {
    ReplicaId((round % n as u64) as u32)
}

/// An opaque client command. Equality is digest equality.
#[derive(Clone)]
pub struct ClientMessage {
    payload: Arc<[u8]>,
    id: Digest,
}

impl ClientMessage {
    pub fn new(payload: impl Into<Arc<[u8]>>) -> Self {
        let payload = payload.into();
        let id = Digest::of(&payload);
        ClientMessage { payload, id }
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn id(&self) -> Digest {
        self.id
    }
}

impl PartialEq for ClientMessage {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
    }
}

impl Eq for ClientMessage {}

impl fmt::Debug for ClientMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ClientMessage({:?}, {}B)", self.id, self.payload.len())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BatchError {
    #[error("a batch must contain at least one entry")]
    Empty,
    #[error("batch entry {0:?} appears more than once")]
    Duplicate(Digest),
}

#[derive(Debug)]
struct BatchInner {
    entries: Vec<ClientMessage>,
    digest: Digest,
}

/// An ordered, duplicate-free, non-empty sequence of client messages.
///
/// The digest covers the canonical encoding of the entries, so the same entries
/// in the same order always produce the same digest. Cloning is cheap.
#[derive(Clone, Debug)]
pub struct Batch(Arc<BatchInner>);

impl Batch {
    pub fn new(entries: Vec<ClientMessage>) -> Result<Self, BatchError> {
        if entries.is_empty() {
            return Err(BatchError::Empty);
        }
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.id()) {
                return Err(BatchError::Duplicate(e.id()));
            }
        }
        let mut buf = Vec::new();
        crate::codec::put_entries(&mut buf, &entries);
        let digest = Digest::of(&buf);
        Ok(Batch(Arc::new(BatchInner { entries, digest })))
    }

    pub fn entries(&self) -> &[ClientMessage] {
        &self.0.entries
    }

    pub fn digest(&self) -> Digest {
        self.0.digest
    }

    pub fn len(&self) -> usize {
        self.0.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.entries.is_empty()
    }

    /// Total payload bytes.
    pub fn payload_bytes(&self) -> usize {
        self.0.entries.iter().map(|e| e.payload().len()).sum()
    }
}

impl PartialEq for Batch {
    fn eq(&self, other: &Self) -> bool {
        self.digest() == other.digest()
    }
}

impl Eq for Batch {}
