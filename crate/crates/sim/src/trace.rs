//! Trace records and the trace file format.
//!
//! A trace file is the magic `ABTR`, a version byte, the message format tag,
//! the run manifest as JSON, the records, the run outcome and finally the
//! SHA-256 trace digest. The digest covers the manifest, every record and the
//! outcome, so two runs with the same digest made identical decisions at every
//! step.

use std::path::Path;

use abcast_core::codec::{DecodeError, Reader, Writer, FORMAT_TAG};
use abcast_core::event::ProtocolEvent;
use abcast_core::message::MessageKind;
use abcast_core::types::{Digest, ReplicaId};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::scenario::RunSpec;

pub const MAGIC: &[u8; 4] = b"ABTR";
pub const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("not a trace file")]
    BadMagic,
    #[error("unsupported trace version {0}")]
    Version(u8),
    #[error("malformed trace: {0}")]
    Decode(#[from] DecodeError),
    #[error("malformed manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// What a step fed into a replica.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Input {
    Start,
    /// A network message; `kind` is the raw kind byte, 0 if unreadable.
    Message { src: ReplicaId, kind: u8, digest: Digest },
    Submit { tx: Digest, valid: bool },
    Flush,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepRecord {
    pub step: u64,
    pub replica: ReplicaId,
    pub input: Input,
    /// Point-to-point messages the replica emitted, by kind.
    pub sent: Vec<(MessageKind, u32)>,
    /// Digest of everything the replica emitted in this step.
    pub out_digest: Digest,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Record {
    Step(StepRecord),
    Event { step: u64, replica: ReplicaId, event: ProtocolEvent },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Snapshot {
    pub replica: ReplicaId,
    pub round: u64,
    pub delivered: u64,
    pub set_hash: Digest,
    pub violations: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outcome {
    pub steps: u64,
    pub quiescent: bool,
    pub snapshots: Vec<Snapshot>,
}

#[derive(Clone, Debug)]
pub struct Trace {
    pub manifest: RunSpec,
    pub records: Vec<Record>,
    pub outcome: Outcome,
    pub digest: Digest,
}

impl Record {
    pub fn encode(&self, w: &mut Writer) {
        match self {
            Record::Step(s) => {
                w.u8(1).u64(s.step).replica(s.replica);
                match &s.input {
                    Input::Start => {
                        w.u8(0);
                    }
                    Input::Message { src, kind, digest } => {
                        w.u8(1).replica(*src).u8(*kind).raw(&digest.0);
                    }
                    Input::Submit { tx, valid } => {
                        w.u8(2).raw(&tx.0).bool(*valid);
                    }
                    Input::Flush => {
                        w.u8(3);
                    }
                }
                w.u8(s.sent.len() as u8);
                for (k, c) in &s.sent {
                    w.u8(*k as u8).u32(*c);
                }
                w.raw(&s.out_digest.0);
            }
            Record::Event { step, replica, event } => {
                w.u8(2).u64(*step).replica(*replica);
                event.encode(w);
            }
        }
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match r.u8()? {
            1 => {
                let step = r.u64()?;
                let replica = r.replica()?;
                let input = match r.u8()? {
                    0 => Input::Start,
                    1 => Input::Message { src: r.replica()?, kind: r.u8()?, digest: Digest(r.array()?) },
                    2 => Input::Submit { tx: Digest(r.array()?), valid: r.bool()? },
                    3 => Input::Flush,
                    _ => return Err(DecodeError::Invalid("input tag")),
                };
                let count = r.u8()?;
                let mut sent = Vec::with_capacity(count as usize);
                for _ in 0..count {
                    let k = r.u8()?;
                    let kind = MessageKind::from_u8(k).ok_or(DecodeError::UnknownKind(k))?;
                    sent.push((kind, r.u32()?));
                }
                let out_digest = Digest(r.array()?);
                Ok(Record::Step(StepRecord { step, replica, input, sent, out_digest }))
            }
            2 => Ok(Record::Event { step: r.u64()?, replica: r.replica()?, event: ProtocolEvent::decode(r)? }),
            _ => Err(DecodeError::Invalid("record tag")),
        }
    }

    pub fn step(&self) -> u64 {
        match self {
            Record::Step(s) => s.step,
            Record::Event { step, .. } => *step,
        }
    }
}

impl Outcome {
    fn encode(&self, w: &mut Writer) {
        w.u64(self.steps).bool(self.quiescent).u32(self.snapshots.len() as u32);
        for s in &self.snapshots {
            w.replica(s.replica).u64(s.round).u64(s.delivered).raw(&s.set_hash.0).u64(s.violations);
        }
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let steps = r.u64()?;
        let quiescent = r.bool()?;
        let count = r.u32()? as usize;
        let mut snapshots = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            snapshots.push(Snapshot {
                replica: r.replica()?,
                round: r.u64()?,
                delivered: r.u64()?,
                set_hash: Digest(r.array()?),
                violations: r.u64()?,
            });
        }
        Ok(Outcome { steps, quiescent, snapshots })
    }
}

/// Incremental trace digest.
pub struct TraceHasher {
    hasher: Sha256,
    buf: Vec<u8>,
}

impl TraceHasher {
    pub fn new(manifest: &RunSpec) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(MAGIC);
        hasher.update(serde_json::to_vec(manifest).expect("manifest serializes"));
        TraceHasher { hasher, buf: Vec::new() }
    }

    pub fn record(&mut self, rec: &Record) {
        let mut w = Writer::new();
        rec.encode(&mut w);
        self.buf = w.finish();
        self.hasher.update((self.buf.len() as u32).to_be_bytes());
        self.hasher.update(&self.buf);
    }

    pub fn finish(mut self, outcome: &Outcome) -> Digest {
        let mut w = Writer::new();
        outcome.encode(&mut w);
        self.hasher.update(w.finish());
        Digest(self.hasher.finalize().into())
    }
}

impl Trace {
    /// Digest recomputed from the contents, for comparison with `digest`.
    pub fn recompute_digest(&self) -> Digest {
        let mut h = TraceHasher::new(&self.manifest);
        for r in &self.records {
            h.record(r);
        }
        h.finish(&self.outcome)
    }

    /// Recomputes and stores the digest after the records were edited.
    pub fn reseal(&mut self) {
        self.digest = self.recompute_digest();
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(MAGIC).u8(VERSION).u8(FORMAT_TAG);
        w.bytes(&serde_json::to_vec(&self.manifest).expect("manifest serializes"));
        w.u64(self.records.len() as u64);
        for r in &self.records {
            let mut inner = Writer::new();
            r.encode(&mut inner);
            w.bytes(&inner.finish());
        }
        self.outcome.encode(&mut w);
        w.raw(&self.digest.0);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TraceError> {
        if bytes.len() < 6 || &bytes[..4] != MAGIC {
            return Err(TraceError::BadMagic);
        }
        if bytes[4] != VERSION {
            return Err(TraceError::Version(bytes[4]));
        }
        let mut r = Reader::new(&bytes[5..]);
        r.expect_tag()?;
        let manifest: RunSpec = serde_json::from_slice(r.bytes()?)?;
        let count = r.u64()?;
        let mut records = Vec::new();
        for _ in 0..count {
            let mut inner = Reader::new(r.bytes()?);
            records.push(Record::decode(&mut inner)?);
            inner.finish()?;
        }
        let outcome = Outcome::decode(&mut r)?;
        let digest = Digest(r.array()?);
        r.finish()?;
        Ok(Trace { manifest, records, outcome, digest })
    }

    pub fn save(&self, path: &Path) -> Result<(), TraceError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TraceError> {
        Trace::from_bytes(&std::fs::read(path)?)
    }

    /// Protocol events in trace order.
    pub fn events(&self) -> impl Iterator<Item = (u64, ReplicaId, &ProtocolEvent)> {
        self.records.iter().filter_map(|r| match r {
            Record::Event { step, replica, event } => Some((*step, *replica, event)),
            _ => None,
        })
    }

    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter_map(|r| match r {
            Record::Step(s) => Some(s),
            _ => None,
        })
    }
}
