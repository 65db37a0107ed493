//! Observable protocol events. Replicas emit these alongside their outbound
//! messages; the simulator records them and every metric and trace check is
//! computed from them.

use crate::codec::{DecodeError, Reader, Writer};
use crate::message::{Body, Outgoing};
use crate::types::{Digest, ReplicaId};

/// Byzantine-attributable malformed or unexpected input. A correct replica
/// counts these and carries on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum ViolationKind {
    Unparseable = 1,
    SenderMismatch = 2,
    NonOriginSend = 3,
    EquivocatingSend = 4,
    UnexpectedEchoShare = 5,
    InvalidEchoShare = 6,
    InvalidProof = 7,
    InvalidCoinShare = 8,
    EmptyConf = 9,
    ConflictingAux = 10,
    ConflictingFinish = 11,
    RoundOverflow = 12,
    UnknownReplica = 13,
    MisaddressedFiller = 14,
}

impl ViolationKind {
    pub const ALL: [ViolationKind; 14] = [
        ViolationKind::Unparseable,
        ViolationKind::SenderMismatch,
        ViolationKind::NonOriginSend,
        ViolationKind::EquivocatingSend,
        ViolationKind::UnexpectedEchoShare,
        ViolationKind::InvalidEchoShare,
        ViolationKind::InvalidProof,
        ViolationKind::InvalidCoinShare,
        ViolationKind::EmptyConf,
        ViolationKind::ConflictingAux,
        ViolationKind::ConflictingFinish,
        ViolationKind::RoundOverflow,
        ViolationKind::UnknownReplica,
        ViolationKind::MisaddressedFiller,
    ];

    pub fn from_u8(v: u8) -> Option<Self> {
        ViolationKind::ALL.get((v as usize).wrapping_sub(1)).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ViolationKind::Unparseable => "unparseable",
            ViolationKind::SenderMismatch => "sender_mismatch",
            ViolationKind::NonOriginSend => "non_origin_send",
            ViolationKind::EquivocatingSend => "equivocating_send",
            ViolationKind::UnexpectedEchoShare => "unexpected_echo_share",
            ViolationKind::InvalidEchoShare => "invalid_echo_share",
            ViolationKind::InvalidProof => "invalid_proof",
            ViolationKind::InvalidCoinShare => "invalid_coin_share",
            ViolationKind::EmptyConf => "empty_conf",
            ViolationKind::ConflictingAux => "conflicting_aux",
            ViolationKind::ConflictingFinish => "conflicting_finish",
            ViolationKind::RoundOverflow => "round_overflow",
            ViolationKind::UnknownReplica => "unknown_replica",
            ViolationKind::MisaddressedFiller => "misaddressed_filler",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ProtocolEvent {
    /// Entered agreement round `round` with `delivered_count` delivered
    /// messages whose digests XOR to `set_hash`.
    RoundEntered { round: u64, delivered_count: u64, set_hash: Digest },
    /// Input to the round's ABA: the head slot of the round's queue and the
    /// digest there, if filled.
    AbaProposed { round: u64, queue: ReplicaId, head: u64, value: Option<Digest> },
    AbaDecided { round: u64, value: bool, internal_round: u32 },
    VcbcDelivered { origin: ReplicaId, priority: u64, digest: Digest },
    BatchDelivered { round: u64, queue: ReplicaId, slot: u64, digest: Digest },
    Output { round: u64, tx: Digest },
    Violation { kind: ViolationKind },
}

impl ProtocolEvent {
    pub fn encode(&self, w: &mut Writer) {
        match self {
            ProtocolEvent::RoundEntered { round, delivered_count, set_hash } => {
                w.u8(1).u64(*round).u64(*delivered_count).raw(&set_hash.0);
            }
            ProtocolEvent::AbaProposed { round, queue, head, value } => {
                w.u8(2).u64(*round).replica(*queue).u64(*head);
                match value {
                    Some(d) => w.u8(1).raw(&d.0),
                    None => w.u8(0),
                };
            }
            ProtocolEvent::AbaDecided { round, value, internal_round } => {
                w.u8(3).u64(*round).bool(*value).u32(*internal_round);
            }
            ProtocolEvent::VcbcDelivered { origin, priority, digest } => {
                w.u8(4).replica(*origin).u64(*priority).raw(&digest.0);
            }
            ProtocolEvent::BatchDelivered { round, queue, slot, digest } => {
                w.u8(5).u64(*round).replica(*queue).u64(*slot).raw(&digest.0);
            }
            ProtocolEvent::Output { round, tx } => {
                w.u8(6).u64(*round).raw(&tx.0);
            }
            ProtocolEvent::Violation { kind } => {
                w.u8(7).u8(*kind as u8);
            }
        }
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let digest = |r: &mut Reader<'_>| r.array::<32>().map(Digest);
        Ok(match r.u8()? {
            1 => ProtocolEvent::RoundEntered { round: r.u64()?, delivered_count: r.u64()?, set_hash: digest(r)? },
            2 => {
                let round = r.u64()?;
                let queue = r.replica()?;
                let head = r.u64()?;
                let value = match r.u8()? {
                    0 => None,
                    1 => Some(digest(r)?),
                    _ => return Err(DecodeError::Invalid("option tag")),
                };
                ProtocolEvent::AbaProposed { round, queue, head, value }
            }
            3 => ProtocolEvent::AbaDecided { round: r.u64()?, value: r.bool()?, internal_round: r.u32()? },
            4 => ProtocolEvent::VcbcDelivered { origin: r.replica()?, priority: r.u64()?, digest: digest(r)? },
            5 => ProtocolEvent::BatchDelivered {
                round: r.u64()?,
                queue: r.replica()?,
                slot: r.u64()?,
                digest: digest(r)?,
            },
            6 => ProtocolEvent::Output { round: r.u64()?, tx: digest(r)? },
            7 => {
                let k = r.u8()?;
                ProtocolEvent::Violation { kind: ViolationKind::from_u8(k).ok_or(DecodeError::Invalid("violation"))? }
            }
            _ => return Err(DecodeError::Invalid("event tag")),
        })
    }
}

/// What a sub-protocol step produced: messages to send and events to record.
#[derive(Debug, Default)]
pub struct Effects {
    pub outgoing: Vec<Outgoing>,
    pub events: Vec<ProtocolEvent>,
}

impl Effects {
    pub fn send_all(&mut self, body: Body) {
        self.outgoing.push(Outgoing::all(body));
    }

    pub fn send_to(&mut self, node: ReplicaId, body: Body) {
        self.outgoing.push(Outgoing::to(node, body));
    }

    pub fn violation(&mut self, kind: ViolationKind) {
        self.events.push(ProtocolEvent::Violation { kind });
    }

    pub fn event(&mut self, e: ProtocolEvent) {
        self.events.push(e);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn events_round_trip() {
        let d = Digest::of(b"x");
        let events = vec![
            ProtocolEvent::RoundEntered { round: 3, delivered_count: 9, set_hash: d },
            ProtocolEvent::AbaProposed { round: 3, queue: ReplicaId(3), head: 1, value: Some(d) },
            ProtocolEvent::AbaProposed { round: 4, queue: ReplicaId(0), head: 0, value: None },
            ProtocolEvent::AbaDecided { round: 3, value: true, internal_round: 2 },
            ProtocolEvent::VcbcDelivered { origin: ReplicaId(1), priority: 7, digest: d },
            ProtocolEvent::BatchDelivered { round: 3, queue: ReplicaId(3), slot: 1, digest: d },
            ProtocolEvent::Output { round: 3, tx: d },
            ProtocolEvent::Violation { kind: ViolationKind::EmptyConf },
        ];
        for e in events {
            let mut w = Writer::new();
            e.encode(&mut w);
            let bytes = w.finish();
            let mut r = Reader::new(&bytes);
            assert_eq!(ProtocolEvent::decode(&mut r).unwrap(), e);
            assert!(r.is_empty());
        }
    }
}
