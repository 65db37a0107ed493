//! Two-stage asynchronous Byzantine fault tolerant atomic broadcast.
//!
//! Replicas disseminate batches of client messages with verifiable consistent
//! broadcast into per-origin priority queues, then agree round by round, with
//! one binary agreement per round, whether to deliver the head of the queue
//! selected for that round. Every state machine here is deterministic and
//! transport-free: inputs arrive as [`replica::ReplicaEvent`]s and outputs are
//! returned as messages and [`event::ProtocolEvent`]s.

pub mod aba;
pub mod ac;
pub mod bc;
pub mod codec;
pub mod event;
pub mod message;
pub mod pqueue;
pub mod replica;
pub mod tcrypto;
pub mod types;
pub mod vcbc;

pub use event::{ProtocolEvent, ViolationKind};
pub use message::{Body, MessageKind, ProtocolMessage, Target, VcbcId, VerifiableMessage};
pub use replica::{ReplicaError, ReplicaEvent, ReplicaOutput, ReplicaState};
pub use tcrypto::{KeySet, ReplicaKeys};
pub use types::{queue_map, quorums, Batch, ClientMessage, Config, Digest, ReplicaId};
