//! The protocol message envelope. Every message addresses exactly one
//! sub-protocol instance: a VCBC instance, an ABA instance, or a queue for
//! recovery traffic.

use std::fmt;

use crate::tcrypto::{SignatureShare, ThresholdSignature};
use crate::types::{Batch, ReplicaId};

/// A VCBC instance: proposal `priority` of replica `origin`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VcbcId {
    pub origin: ReplicaId,
    pub priority: u64,
}

impl fmt::Display for VcbcId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.origin, self.priority)
    }
}

/// A self-authenticating VCBC result: the payload and the threshold proof over
/// `(origin, priority, digest)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VerifiableMessage {
    pub id: VcbcId,
    pub payload: Batch,
    pub proof: ThresholdSignature,
}

/// A subset of `{0, 1}` as a two-bit mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BinSet(u8);

impl BinSet {
    pub const EMPTY: BinSet = BinSet(0);
    pub const BOTH: BinSet = BinSet(3);

    pub fn single(b: bool) -> Self {
        BinSet(if b { 2 } else { 1 })
    }

    pub fn from_mask(mask: u8) -> Option<Self> {
        (mask <= 3).then_some(BinSet(mask))
    }

    pub fn mask(self) -> u8 {
        self.0
    }

    pub fn contains(self, b: bool) -> bool {
        self.0 & BinSet::single(b).0 != 0
    }

    pub fn insert(&mut self, b: bool) {
        self.0 |= BinSet::single(b).0;
    }

    pub fn union(self, other: BinSet) -> BinSet {
        BinSet(self.0 | other.0)
    }

    pub fn is_subset(self, other: BinSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// The only element, if this is a singleton.
    pub fn definite(self) -> Option<bool> {
        match self.0 {
            1 => Some(false),
            2 => Some(true),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum MessageKind {
    VcbcSend = 1,
    VcbcEchoShare = 2,
    VcbcFinal = 3,
    AbaBval = 4,
    AbaAux = 5,
    AbaConf = 6,
    AbaCoinShare = 7,
    AbaFinish = 8,
    FillGap = 9,
    Filler = 10,
}

impl MessageKind {
    pub const ALL: [MessageKind; 10] = [
        MessageKind::VcbcSend,
        MessageKind::VcbcEchoShare,
        MessageKind::VcbcFinal,
        MessageKind::AbaBval,
        MessageKind::AbaAux,
        MessageKind::AbaConf,
        MessageKind::AbaCoinShare,
        MessageKind::AbaFinish,
        MessageKind::FillGap,
        MessageKind::Filler,
    ];

    pub fn from_u8(v: u8) -> Option<Self> {
        MessageKind::ALL.get((v as usize).wrapping_sub(1)).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            MessageKind::VcbcSend => "VCBC_SEND",
            MessageKind::VcbcEchoShare => "VCBC_ECHO_SHARE",
            MessageKind::VcbcFinal => "VCBC_FINAL",
            MessageKind::AbaBval => "ABA_BVAL",
            MessageKind::AbaAux => "ABA_AUX",
            MessageKind::AbaConf => "ABA_CONF",
            MessageKind::AbaCoinShare => "ABA_COIN_SHARE",
            MessageKind::AbaFinish => "ABA_FINISH",
            MessageKind::FillGap => "FILL_GAP",
            MessageKind::Filler => "FILLER",
        }
    }

    pub fn is_vcbc(self) -> bool {
        matches!(self, MessageKind::VcbcSend | MessageKind::VcbcEchoShare | MessageKind::VcbcFinal)
    }

    pub fn is_aba(self) -> bool {
        matches!(
            self,
            MessageKind::AbaBval
                | MessageKind::AbaAux
                | MessageKind::AbaConf
                | MessageKind::AbaCoinShare
                | MessageKind::AbaFinish
        )
    }
}

/// Instance addressed by a message.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum InstanceTag {
    Vcbc(VcbcId),
    Aba(u64),
    Recovery(ReplicaId),
}

/// Messages exchanged inside one ABA instance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AbaMessage {
    Bval { internal: u32, value: bool },
    Aux { internal: u32, value: bool },
    Conf { internal: u32, values: BinSet },
    CoinShare { internal: u32, share: SignatureShare },
    Finish { value: bool },
}

impl AbaMessage {
    pub fn kind(&self) -> MessageKind {
        match self {
            AbaMessage::Bval { .. } => MessageKind::AbaBval,
            AbaMessage::Aux { .. } => MessageKind::AbaAux,
            AbaMessage::Conf { .. } => MessageKind::AbaConf,
            AbaMessage::CoinShare { .. } => MessageKind::AbaCoinShare,
            AbaMessage::Finish { .. } => MessageKind::AbaFinish,
        }
    }

    pub fn internal_round(&self) -> Option<u32> {
        match *self {
            AbaMessage::Bval { internal, .. }
            | AbaMessage::Aux { internal, .. }
            | AbaMessage::Conf { internal, .. }
            | AbaMessage::CoinShare { internal, .. } => Some(internal),
            AbaMessage::Finish { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Body {
    VcbcSend { id: VcbcId, payload: Batch },
    VcbcEchoShare { id: VcbcId, share: SignatureShare },
    /// The FINAL body is exactly the verifiable message.
    VcbcFinal(VerifiableMessage),
    Aba { round: u64, msg: AbaMessage },
    FillGap { queue: ReplicaId, slot: u64 },
    Filler { queue: ReplicaId, entries: Vec<VerifiableMessage> },
}

impl Body {
    pub fn kind(&self) -> MessageKind {
        match self {
            Body::VcbcSend { .. } => MessageKind::VcbcSend,
            Body::VcbcEchoShare { .. } => MessageKind::VcbcEchoShare,
            Body::VcbcFinal(_) => MessageKind::VcbcFinal,
            Body::Aba { msg, .. } => msg.kind(),
            Body::FillGap { .. } => MessageKind::FillGap,
            Body::Filler { .. } => MessageKind::Filler,
        }
    }

    pub fn instance(&self) -> InstanceTag {
        match self {
            Body::VcbcSend { id, .. } | Body::VcbcEchoShare { id, .. } => InstanceTag::Vcbc(*id),
            Body::VcbcFinal(m) => InstanceTag::Vcbc(m.id),
            Body::Aba { round, .. } => InstanceTag::Aba(*round),
            Body::FillGap { queue, .. } | Body::Filler { queue, .. } => InstanceTag::Recovery(*queue),
        }
    }
}

/// The wire envelope.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProtocolMessage {
    pub sender: ReplicaId,
    pub body: Body,
}

impl ProtocolMessage {
    pub fn new(sender: ReplicaId, body: Body) -> Self {
        ProtocolMessage { sender, body }
    }

    pub fn kind(&self) -> MessageKind {
        self.body.kind()
    }

    pub fn instance(&self) -> InstanceTag {
        self.body.instance()
    }
}

/// Destination of an outbound message.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    All,
    Node(ReplicaId),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outgoing {
    pub to: Target,
    pub body: Body,
}

impl Outgoing {
    pub fn all(body: Body) -> Self {
        Outgoing { to: Target::All, body }
    }

    pub fn to(node: ReplicaId, body: Body) -> Self {
        Outgoing { to: Target::Node(node), body }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binset_ops() {
        let zero = BinSet::single(false);
        let one = BinSet::single(true);
        assert_eq!(zero.union(one), BinSet::BOTH);
        assert!(one.is_subset(BinSet::BOTH));
        assert!(!BinSet::BOTH.is_subset(one));
        assert!(BinSet::EMPTY.is_subset(zero));
        assert_eq!(one.definite(), Some(true));
        assert_eq!(BinSet::BOTH.definite(), None);
        assert!(BinSet::from_mask(4).is_none());
    }

    #[test]
    fn kind_round_trip() {
        for k in MessageKind::ALL {
            assert_eq!(MessageKind::from_u8(k as u8), Some(k));
        }
        assert_eq!(MessageKind::from_u8(0), None);
        assert_eq!(MessageKind::from_u8(11), None);
    }
}
