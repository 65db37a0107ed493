//! One replica: the broadcast component, the agreement component, their VCBC
//! and ABA instances and the per-origin queues, driven by a single event loop.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::aba::{AbaContext, AbaDecision, AbaInstance};
use crate::ac::{self, AcState, Phase};
use crate::bc::{self, BcState};
use crate::codec;
use crate::event::{Effects, ProtocolEvent, ViolationKind};
use crate::message::{Body, ProtocolMessage, Target, VcbcId, VerifiableMessage};
use crate::pqueue::PriorityQueue;
use crate::tcrypto::ReplicaKeys;
use crate::types::{queue_map, Batch, ClientMessage, Config, Digest, ReplicaId};
use crate::vcbc::{VcbcContext, VcbcInstance};

/// How far past the current agreement round ABA traffic is stored.
pub const ROUND_WINDOW: u64 = 4096;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReplicaError {
    #[error("replica {id} is outside a system of {n}")]
    UnknownReplica { id: ReplicaId, n: usize },
    #[error("key material does not match the configuration: {0}")]
    KeyMismatch(&'static str),
    #[error("client payload is empty")]
    EmptyPayload,
}

#[derive(Clone, Debug)]
pub enum ReplicaEvent {
    ClientSubmit(ClientMessage),
    /// Raw bytes from the network, with the authenticated channel sender.
    Receive { from: ReplicaId, bytes: Vec<u8> },
    /// Cut a batch from a partially filled buffer. Harness use only.
    HarnessFlush,
}

#[derive(Clone, Debug, Default)]
pub struct ReplicaOutput {
    pub outbound: Vec<(Target, ProtocolMessage)>,
    pub delivered: Vec<ClientMessage>,
    pub events: Vec<ProtocolEvent>,
}

impl ReplicaOutput {
    pub fn is_empty(&self) -> bool {
        self.outbound.is_empty() && self.delivered.is_empty() && self.events.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct ReplicaState {
    id: ReplicaId,
    cfg: Config,
    keys: ReplicaKeys,
    delivered: BTreeSet<Digest>,
    set_hash: Digest,
    queues: Vec<PriorityQueue>,
    bc: BcState,
    ac: AcState,
    vcbc: BTreeMap<VcbcId, VcbcInstance>,
    aba: BTreeMap<u64, AbaInstance>,
    violations: BTreeMap<ViolationKind, u64>,
}

/// Working buffers for one event.
#[derive(Default)]
struct Step {
    fx: Effects,
    delivered: Vec<ClientMessage>,
}

impl ReplicaState {
    /// Creates the replica and runs its first step: round 0 proposes at once.
    pub fn start(id: ReplicaId, cfg: Config, keys: ReplicaKeys) -> Result<(Self, ReplicaOutput), ReplicaError> {
        if id.index() >= cfg.n {
            return Err(ReplicaError::UnknownReplica { id, n: cfg.n });
        }
        if keys.vcbc_key.parties() != cfg.n || keys.coin_key.parties() != cfg.n {
            return Err(ReplicaError::KeyMismatch("party count"));
        }
        if keys.vcbc_key.threshold() != cfg.vcbc_threshold() {
            return Err(ReplicaError::KeyMismatch("proof threshold"));
        }
        if keys.coin_key.threshold() != cfg.coin_threshold() {
            return Err(ReplicaError::KeyMismatch("coin threshold"));
        }
        if keys.vcbc_share.signer() != id || keys.coin_share.signer() != id {
            return Err(ReplicaError::KeyMismatch("share owner"));
        }
        let mut state = ReplicaState {
            id,
            cfg,
            keys,
            delivered: BTreeSet::new(),
            set_hash: Digest::default(),
            queues: cfg.replicas().map(PriorityQueue::new).collect(),
            bc: BcState::new(cfg.batch_size),
            ac: AcState::default(),
            vcbc: BTreeMap::new(),
            aba: BTreeMap::new(),
            violations: BTreeMap::new(),
        };
        let mut step = Step::default();
        state.drive(&mut step);
        let out = state.finish(step);
        Ok((state, out))
    }

    pub fn id(&self) -> ReplicaId {
        self.id
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn round(&self) -> u64 {
        self.ac.round
    }

    pub fn phase(&self) -> Phase {
        self.ac.phase
    }

    pub fn delivered(&self) -> &BTreeSet<Digest> {
        &self.delivered
    }

    pub fn delivered_hash(&self) -> Digest {
        self.set_hash
    }

    pub fn queues(&self) -> &[PriorityQueue] {
        &self.queues
    }

    pub fn next_priority(&self) -> u64 {
        self.bc.priority()
    }

    pub fn violations(&self) -> &BTreeMap<ViolationKind, u64> {
        &self.violations
    }

    pub fn aba(&self, round: u64) -> Option<&AbaInstance> {
        self.aba.get(&round)
    }

    pub fn vcbc(&self, id: &VcbcId) -> Option<&VcbcInstance> {
        self.vcbc.get(id)
    }

    /// Submits a client payload.
    pub fn broadcast_api(&mut self, payload: Vec<u8>) -> Result<ReplicaOutput, ReplicaError> {
        if payload.is_empty() {
            return Err(ReplicaError::EmptyPayload);
        }
        Ok(self.handle(ReplicaEvent::ClientSubmit(ClientMessage::new(payload))))
    }

    pub fn handle(&mut self, event: ReplicaEvent) -> ReplicaOutput {
        let mut step = Step::default();
        match event {
            ReplicaEvent::ClientSubmit(m) => {
                if let Some((p, batch)) = self.bc.on_client_message(m, &self.delivered) {
                    self.propose_batch(p, batch, &mut step);
                }
            }
            ReplicaEvent::HarnessFlush => {
                if let Some((p, batch)) = self.bc.flush() {
                    self.propose_batch(p, batch, &mut step);
                }
            }
            ReplicaEvent::Receive { from, bytes } => match codec::decode(&bytes) {
                Ok(msg) => self.receive(from, msg, &mut step),
                Err(_) => step.fx.violation(ViolationKind::Unparseable),
            },
        }
        self.drive(&mut step);
        self.finish(step)
    }

    /// Handles an already decoded message.
    pub fn handle_message(&mut self, from: ReplicaId, msg: ProtocolMessage) -> ReplicaOutput {
        let mut step = Step::default();
        self.receive(from, msg, &mut step);
        self.drive(&mut step);
        self.finish(step)
    }

    fn finish(&mut self, step: Step) -> ReplicaOutput {
        for e in &step.fx.events {
            if let ProtocolEvent::Violation { kind } = e {
                *self.violations.entry(*kind).or_default() += 1;
            }
        }
        let me = self.id;
        ReplicaOutput {
            outbound: step
                .fx
                .outgoing
                .into_iter()
                .map(|o| (o.to, ProtocolMessage::new(me, o.body)))
                .collect(),
            delivered: step.delivered,
            events: step.fx.events,
        }
    }

    fn known(&self, r: ReplicaId) -> bool {
        r.index() < self.cfg.n
    }

    fn propose_batch(&mut self, priority: u64, batch: Batch, step: &mut Step) {
        let id = VcbcId { origin: self.id, priority };
        let ctx = VcbcContext { me: self.id, key: &self.keys.vcbc_key, share: &self.keys.vcbc_share };
        let inst = self.vcbc.entry(id).or_insert_with(|| VcbcInstance::new(id));
        inst.broadcast(ctx, batch, &mut step.fx).expect("local priorities are never reused");
    }

    fn receive(&mut self, from: ReplicaId, msg: ProtocolMessage, step: &mut Step) {
        if !self.known(from) {
            step.fx.violation(ViolationKind::UnknownReplica);
            return;
        }
        if msg.sender != from {
            step.fx.violation(ViolationKind::SenderMismatch);
            return;
        }
        match msg.body {
            Body::VcbcSend { id, payload } => {
                if !self.known(id.origin) {
                    return step.fx.violation(ViolationKind::UnknownReplica);
                }
                let ctx = VcbcContext { me: self.id, key: &self.keys.vcbc_key, share: &self.keys.vcbc_share };
                let inst = self.vcbc.entry(id).or_insert_with(|| VcbcInstance::new(id));
                inst.on_send(ctx, from, &payload, &mut step.fx);
            }
            Body::VcbcEchoShare { id, share } => {
                let ctx = VcbcContext { me: self.id, key: &self.keys.vcbc_key, share: &self.keys.vcbc_share };
                match self.vcbc.get_mut(&id) {
                    Some(inst) if id.origin == self.id => inst.on_echo_share(ctx, from, &share, &mut step.fx),
                    _ => step.fx.violation(ViolationKind::UnexpectedEchoShare),
                }
            }
            Body::VcbcFinal(m) => self.accept_final(&m, step),
            Body::Aba { round, msg } => {
                if round > self.ac.round.saturating_add(ROUND_WINDOW) {
                    return step.fx.violation(ViolationKind::RoundOverflow);
                }
                let ctx = AbaContext {
                    me: self.id,
                    n: self.cfg.n,
                    f: self.cfg.f,
                    coin_key: &self.keys.coin_key,
                    coin_share: &self.keys.coin_share,
                };
                let inst = self.aba.entry(round).or_insert_with(|| AbaInstance::new(round));
                if let Some(d) = inst.handle(ctx, from, &msg, &mut step.fx) {
                    step.fx.event(decided(round, d));
                }
            }
            Body::FillGap { queue, slot } => {
                if !self.known(queue) {
                    return step.fx.violation(ViolationKind::UnknownReplica);
                }
                let Some(range) = ac::filler_range(&self.queues[queue.index()], slot) else { return };
                let entries: Vec<VerifiableMessage> = range
                    .filter_map(|p| {
                        let inst = self.vcbc.get(&VcbcId { origin: queue, priority: p })?;
                        inst.verifiable_message().ok().cloned()
                    })
                    .collect();
                if !entries.is_empty() {
                    step.fx.send_to(from, Body::Filler { queue, entries });
                }
            }
            Body::Filler { queue, entries } => {
                for m in &entries {
                    if m.id.origin != queue {
                        step.fx.violation(ViolationKind::MisaddressedFiller);
                        continue;
                    }
                    self.accept_final(m, step);
                }
            }
        }
    }

    fn accept_final(&mut self, m: &VerifiableMessage, step: &mut Step) {
        if !self.known(m.id.origin) {
            return step.fx.violation(ViolationKind::UnknownReplica);
        }
        let ctx = VcbcContext { me: self.id, key: &self.keys.vcbc_key, share: &self.keys.vcbc_share };
        let inst = self.vcbc.entry(m.id).or_insert_with(|| VcbcInstance::new(m.id));
        let out = inst.on_final(ctx, m, &mut step.fx);
        if let Some(vm) = out {
            step.fx.event(ProtocolEvent::VcbcDelivered {
                origin: vm.id.origin,
                priority: vm.id.priority,
                digest: vm.payload.digest(),
            });
            bc::on_vcbc_output(&mut self.queues[vm.id.origin.index()], vm.id.priority, &vm.payload, &self.delivered);
        }
    }

    /// Runs the agreement loop until it has to wait for input.
    fn drive(&mut self, step: &mut Step) {
        loop {
            let r = self.ac.round;
            let q = queue_map(r, self.cfg.n);
            match self.ac.phase {
                Phase::Proposing => {
                    let queue = &self.queues[q.index()];
                    let value = queue.peek().map(Batch::digest);
                    step.fx.event(ProtocolEvent::RoundEntered {
                        round: r,
                        delivered_count: self.delivered.len() as u64,
                        set_hash: self.set_hash,
                    });
                    step.fx.event(ProtocolEvent::AbaProposed { round: r, queue: q, head: queue.head(), value });
                    let ctx = AbaContext {
                        me: self.id,
                        n: self.cfg.n,
                        f: self.cfg.f,
                        coin_key: &self.keys.coin_key,
                        coin_share: &self.keys.coin_share,
                    };
                    let inst = self.aba.entry(r).or_insert_with(|| AbaInstance::new(r));
                    if let Ok(Some(d)) = inst.propose(ctx, value.is_some(), &mut step.fx) {
                        step.fx.event(decided(r, d));
                    }
                    self.ac.phase = Phase::AwaitingAba;
                }
                Phase::AwaitingAba => {
                    let Some(d) = self.aba.get(&r).and_then(AbaInstance::decision) else { break };
                    if !d.value {
                        self.ac.advance();
                    } else if self.queues[q.index()].peek().is_some() {
                        self.deliver_head(q, step);
                    } else {
                        let head = self.queues[q.index()].head();
                        step.fx.send_all(Body::FillGap { queue: q, slot: head });
                        self.ac.phase = Phase::AwaitingValue;
                    }
                }
                Phase::AwaitingValue => {
                    if self.queues[q.index()].peek().is_none() {
                        break;
                    }
                    self.deliver_head(q, step);
                }
            }
        }
    }

    fn deliver_head(&mut self, q: ReplicaId, step: &mut Step) {
        let r = self.ac.round;
        let queue = &self.queues[q.index()];
        let slot = queue.head();
        let value = queue.peek().expect("head is filled").clone();
        step.fx.event(ProtocolEvent::BatchDelivered { round: r, queue: q, slot, digest: value.digest() });
        let out = ac::ac_deliver(&value, &mut self.queues, &mut self.delivered);
        for m in &out {
            self.set_hash = self.set_hash.xor(&m.id());
            step.fx.event(ProtocolEvent::Output { round: r, tx: m.id() });
        }
        if !out.is_empty() {
            ac::sweep_delivered(&mut self.queues, &self.delivered);
        }
        step.delivered.extend(out);
        self.ac.advance();
    }
}

fn decided(round: u64, d: AbaDecision) -> ProtocolEvent {
    ProtocolEvent::AbaDecided { round, value: d.value, internal_round: d.internal_round }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tcrypto::KeySet;

    fn setup(n: usize, f: usize, b: usize) -> (Config, KeySet) {
        let cfg = Config::new(n, f, b, 8).unwrap();
        (cfg, KeySet::for_config(&cfg, 1).unwrap())
    }

    #[test]
    fn start_proposes_zero() {
        let (cfg, keys) = setup(4, 1, 1);
        let (st, out) = ReplicaState::start(ReplicaId(0), cfg, keys.replica(ReplicaId(0)).unwrap()).unwrap();
        assert_eq!(st.queues().len(), 4);
        assert_eq!(st.round(), 0);
        assert_eq!(out.outbound.len(), 1);
        assert!(matches!(
            out.outbound[0].1.body,
            Body::Aba { round: 0, msg: crate::message::AbaMessage::Bval { internal: 0, value: false } }
        ));
    }

    #[test]
    fn mismatched_keys_rejected() {
        let (_, keys) = setup(4, 1, 1);
        let cfg5 = Config::new(5, 1, 1, 8).unwrap();
        assert!(ReplicaState::start(ReplicaId(0), cfg5, keys.replica(ReplicaId(0)).unwrap()).is_err());
        let (cfg, keys) = setup(4, 1, 1);
        assert!(ReplicaState::start(ReplicaId(1), cfg, keys.replica(ReplicaId(0)).unwrap()).is_err());
    }

    #[test]
    fn submit_with_batch_of_one_sends() {
        let (cfg, keys) = setup(4, 1, 1);
        let (mut st, _) = ReplicaState::start(ReplicaId(2), cfg, keys.replica(ReplicaId(2)).unwrap()).unwrap();
        let out = st.broadcast_api(vec![7; 250]).unwrap();
        assert_eq!(out.outbound.len(), 1);
        assert_eq!(out.outbound[0].0, Target::All);
        assert!(matches!(out.outbound[0].1.body, Body::VcbcSend { .. }));
        assert_eq!(st.broadcast_api(vec![]).unwrap_err(), ReplicaError::EmptyPayload);
    }

    #[test]
    fn garbage_is_counted() {
        let (cfg, keys) = setup(4, 1, 1);
        let (mut st, _) = ReplicaState::start(ReplicaId(0), cfg, keys.replica(ReplicaId(0)).unwrap()).unwrap();
        let out = st.handle(ReplicaEvent::Receive { from: ReplicaId(1), bytes: vec![9, 9, 9] });
        assert!(out.outbound.is_empty() && out.delivered.is_empty());
        assert_eq!(st.violations().get(&ViolationKind::Unparseable), Some(&1));
    }
}
