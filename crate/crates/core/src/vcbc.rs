//! Verifiable consistent broadcast by echo broadcast: the origin sends its
//! payload, collects threshold signature shares over a tag binding
//! `(origin, priority, digest)`, combines them into a proof and sends the
//! self-authenticating final message to everyone.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::event::{Effects, ViolationKind};
use crate::message::{Body, VcbcId, VerifiableMessage};
use crate::tcrypto::{PublicKey, SecretKeyShare, SignatureShare};
use crate::types::{Batch, Digest, ReplicaId};

const TAG: u8 = 0x5c;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VcbcError {
    #[error("instance {0} already broadcast")]
    AlreadyBroadcast(VcbcId),
    #[error("only the origin of {0} may broadcast")]
    NotOrigin(VcbcId),
    #[error("instance {0} has not delivered")]
    Unavailable(VcbcId),
}

/// The bytes signed by echo shares and the final proof.
pub fn signed_tag(id: &VcbcId, digest: &Digest) -> [u8; 45] {
    let mut out = [0u8; 45];
    out[0] = TAG;
    out[1..5].copy_from_slice(&id.origin.0.to_be_bytes());
    out[5..13].copy_from_slice(&id.priority.to_be_bytes());
    out[13..].copy_from_slice(&digest.0);
    out
}

/// Checks a verifiable message against the proof key.
pub fn verify_message(key: &PublicKey, m: &VerifiableMessage) -> bool {
    key.verify(&signed_tag(&m.id, &m.payload.digest()), &m.proof)
}

/// Keys and identity a replica needs to run VCBC instances.
#[derive(Clone, Copy)]
pub struct VcbcContext<'a> {
    pub me: ReplicaId,
    pub key: &'a PublicKey,
    pub share: &'a SecretKeyShare,
}

#[derive(Clone, Debug)]
pub struct VcbcInstance {
    id: VcbcId,
    /// Set at the origin once it has broadcast.
    sent: Option<Batch>,
    /// Digest of the SEND this replica echoed.
    echoed: Option<Digest>,
    echo_shares: BTreeMap<ReplicaId, SignatureShare>,
    finalized: bool,
    delivered: Option<VerifiableMessage>,
}

impl VcbcInstance {
    pub fn new(id: VcbcId) -> Self {
        VcbcInstance { id, sent: None, echoed: None, echo_shares: BTreeMap::new(), finalized: false, delivered: None }
    }

    pub fn id(&self) -> VcbcId {
        self.id
    }

    pub fn is_delivered(&self) -> bool {
        self.delivered.is_some()
    }

    pub fn echoed(&self) -> Option<Digest> {
        self.echoed
    }

    /// Starts the broadcast at the origin.
    pub fn broadcast(&mut self, ctx: VcbcContext<'_>, payload: Batch, fx: &mut Effects) -> Result<(), VcbcError> {
        if ctx.me != self.id.origin {
            return Err(VcbcError::NotOrigin(self.id));
        }
        if self.sent.is_some() {
            return Err(VcbcError::AlreadyBroadcast(self.id));
        }
        self.sent = Some(payload.clone());
        fx.send_all(Body::VcbcSend { id: self.id, payload });
        Ok(())
    }

    pub fn on_send(&mut self, ctx: VcbcContext<'_>, from: ReplicaId, payload: &Batch, fx: &mut Effects) {
        if from != self.id.origin {
            fx.violation(ViolationKind::NonOriginSend);
            return;
        }
        let digest = payload.digest();
        match self.echoed {
            Some(d) if d == digest => {}
            Some(_) => fx.violation(ViolationKind::EquivocatingSend),
            None => {
                self.echoed = Some(digest);
                let share = ctx.share.sign(&signed_tag(&self.id, &digest));
                fx.send_to(self.id.origin, Body::VcbcEchoShare { id: self.id, share });
            }
        }
    }

    pub fn on_echo_share(&mut self, ctx: VcbcContext<'_>, from: ReplicaId, share: &SignatureShare, fx: &mut Effects) {
        let Some(payload) = self.sent.clone() else {
            fx.violation(ViolationKind::UnexpectedEchoShare);
            return;
        };
        if self.finalized || self.echo_shares.contains_key(&from) {
            return;
        }
        let tag = signed_tag(&self.id, &payload.digest());
        if share.signer != from || !ctx.key.verify_share(from, &tag, share) {
            fx.violation(ViolationKind::InvalidEchoShare);
            return;
        }
        self.echo_shares.insert(from, share.clone());
        if self.echo_shares.len() < ctx.key.threshold() {
            return;
        }
        let shares: Vec<SignatureShare> = self.echo_shares.values().cloned().collect();
        let proof = ctx.key.combine(&tag, &shares).expect("threshold of verified shares");
        self.finalized = true;
        self.echo_shares.clear();
        fx.send_all(Body::VcbcFinal(VerifiableMessage { id: self.id, payload, proof }));
    }

    /// Accepts a final message, from the origin or relayed inside a FILLER.
    /// Returns the message the first time the instance delivers.
    pub fn on_final(
        &mut self,
        ctx: VcbcContext<'_>,
        m: &VerifiableMessage,
        fx: &mut Effects,
    ) -> Option<VerifiableMessage> {
        if self.delivered.is_some() {
            return None;
        }
        if m.id != self.id || !verify_message(ctx.key, m) {
            fx.violation(ViolationKind::InvalidProof);
            return None;
        }
        self.delivered = Some(m.clone());
        Some(m.clone())
    }

    pub fn verifiable_message(&self) -> Result<&VerifiableMessage, VcbcError> {
        self.delivered.as_ref().ok_or(VcbcError::Unavailable(self.id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::message::{ProtocolMessage, Target};
    use crate::tcrypto::{deal, DealerOutput};
    use crate::types::ClientMessage;

    fn setup() -> DealerOutput {
        deal(4, 3, 11).unwrap()
    }

    fn ctx(d: &DealerOutput, i: u32) -> VcbcContext<'_> {
        VcbcContext { me: ReplicaId(i), key: &d.public_key, share: &d.shares[i as usize] }
    }

    fn batch(s: &str) -> Batch {
        Batch::new(vec![ClientMessage::new(s.as_bytes().to_vec())]).unwrap()
    }

    const ID: VcbcId = VcbcId { origin: ReplicaId(0), priority: 0 };

    #[test]
    fn broadcast_once() {
        let d = setup();
        let mut inst = VcbcInstance::new(ID);
        let mut fx = Effects::default();
        inst.broadcast(ctx(&d, 0), batch("a"), &mut fx).unwrap();
        assert_eq!(fx.outgoing.len(), 1);
        assert_eq!(fx.outgoing[0].to, Target::All);
        assert_eq!(inst.broadcast(ctx(&d, 0), batch("a"), &mut fx), Err(VcbcError::AlreadyBroadcast(ID)));
    }

    #[test]
    fn equivocating_send_is_ignored() {
        let d = setup();
        let mut inst = VcbcInstance::new(ID);
        let mut fx = Effects::default();
        inst.on_send(ctx(&d, 1), ReplicaId(0), &batch("a"), &mut fx);
        assert_eq!(fx.outgoing.len(), 1);
        assert_eq!(fx.outgoing[0].to, Target::Node(ReplicaId(0)));
        inst.on_send(ctx(&d, 1), ReplicaId(0), &batch("a"), &mut fx);
        assert_eq!(fx.outgoing.len(), 1);
        inst.on_send(ctx(&d, 1), ReplicaId(0), &batch("b"), &mut fx);
        assert_eq!(fx.outgoing.len(), 1);
        assert_eq!(fx.events.len(), 1);
        inst.on_send(ctx(&d, 1), ReplicaId(2), &batch("c"), &mut fx);
        assert_eq!(fx.events.len(), 2);
    }

    #[test]
    fn third_share_finalizes() {
        let d = setup();
        let mut origin = VcbcInstance::new(ID);
        let mut fx = Effects::default();
        origin.broadcast(ctx(&d, 0), batch("a"), &mut fx).unwrap();
        let tag = signed_tag(&ID, &batch("a").digest());
        for i in 0..4u32 {
            let share = d.shares[i as usize].sign(&tag);
            origin.on_echo_share(ctx(&d, 0), ReplicaId(i), &share, &mut fx);
            let finals = fx.outgoing.iter().filter(|o| matches!(o.body, Body::VcbcFinal(_))).count();
            assert_eq!(finals, usize::from(i >= 2));
        }
    }

    #[test]
    fn wrong_digest_share_dropped() {
        let d = setup();
        let mut origin = VcbcInstance::new(ID);
        let mut fx = Effects::default();
        origin.broadcast(ctx(&d, 0), batch("a"), &mut fx).unwrap();
        let share = d.shares[1].sign(&signed_tag(&ID, &batch("b").digest()));
        origin.on_echo_share(ctx(&d, 0), ReplicaId(1), &share, &mut fx);
        assert_eq!(fx.events, vec![crate::event::ProtocolEvent::Violation { kind: ViolationKind::InvalidEchoShare }]);
    }

    #[test]
    fn final_delivers_once_without_send() {
        let d = setup();
        let tag = signed_tag(&ID, &batch("a").digest());
        let shares: Vec<_> = (0..3).map(|i| d.shares[i].sign(&tag)).collect();
        let m = VerifiableMessage { id: ID, payload: batch("a"), proof: d.public_key.combine(&tag, &shares).unwrap() };
        let mut inst = VcbcInstance::new(ID);
        let mut fx = Effects::default();
        assert!(inst.verifiable_message().is_err());
        let mut bad = m.clone();
        bad.proof.value[7] ^= 1;
        assert!(inst.on_final(ctx(&d, 2), &bad, &mut fx).is_none());
        assert_eq!(fx.events.len(), 1);
        assert!(inst.on_final(ctx(&d, 2), &m, &mut fx).is_some());
        assert!(inst.on_final(ctx(&d, 2), &m, &mut fx).is_none());
        assert_eq!(inst.verifiable_message().unwrap(), &m);
    }
    #[test]
    fn proof_size_does_not_grow_with_payload() {
        let d = setup();
        let overhead = |entries: usize| {
            let payload = Batch::new((0..entries).map(|k| ClientMessage::new(format!("tx{k}").into_bytes())).collect()).unwrap();
            let tag = signed_tag(&ID, &payload.digest());
            let shares: Vec<_> = (0..3).map(|i| d.shares[i].sign(&tag)).collect();
            let proof = d.public_key.combine(&tag, &shares).unwrap();
            let send = crate::codec::encode(&ProtocolMessage::new(ReplicaId(0), Body::VcbcSend { id: ID, payload: payload.clone() }));
            let fin = crate::codec::encode(&ProtocolMessage::new(
                ReplicaId(0),
                Body::VcbcFinal(VerifiableMessage { id: ID, payload, proof }),
            ));
            fin.len() - send.len()
        };
        assert_eq!(overhead(1), overhead(100_000));
        assert!(overhead(1) <= crate::tcrypto::SIGNATURE_BYTES + 8);
    }
}
