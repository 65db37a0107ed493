//! Deterministic network simulator.
//!
//! One step processes exactly one input at one replica: a replica start, a
//! client submission, a harness flush or a network delivery. Channels are
//! reliable: a message is never dropped or altered in transit. Faulty replicas
//! alter their own outbound messages before they enter the network.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};

use abcast_core::codec::encode;
use abcast_core::message::{AbaMessage, BinSet, Body, MessageKind, ProtocolMessage, Target};
use abcast_core::replica::{ReplicaEvent, ReplicaOutput, ReplicaState};
use abcast_core::tcrypto::KeySet;
use abcast_core::types::{Batch, ClientMessage, Config, Digest, ReplicaId};
use abcast_core::ProtocolEvent;
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest as _, Sha256};

use crate::scenario::{Behavior, Policy, RunSpec, ScenarioError, Stop, Workload};
use crate::trace::{Input, Outcome, Record, Snapshot, StepRecord, Trace, TraceHasher};

const FUZZ_SALT: u64 = 0x6675_7a7a_6572_2121;
const CRASH_SALT: u64 = 0x6372_6173_6821_2121;
/// Crash faults stop at a step drawn uniformly below this bound.
pub const CRASH_WINDOW: u64 = 1000;

#[derive(Debug)]
struct Pending {
    src: ReplicaId,
    dst: ReplicaId,
    bytes: Vec<u8>,
    sent_at: u64,
}

/// A withheld final message, released once its destination has run the
/// agreement round that visits the slot.
#[derive(Debug)]
struct Hold {
    origin: ReplicaId,
    priority: u64,
    armed: Option<u64>,
}

/// Undelivered messages and the scheduling policy over them.
struct Network {
    policy: Policy,
    debt: u64,
    next_seq: u64,
    ready: IndexMap<u64, Pending>,
    held: BTreeMap<u64, (Pending, Hold)>,
    undelivered: BTreeSet<u64>,
    links: BTreeMap<(u32, u32), BTreeSet<u64>>,
}

impl Network {
    fn new(policy: Policy, debt: u64) -> Self {
        Network {
            policy,
            debt,
            next_seq: 0,
            ready: IndexMap::new(),
            held: BTreeMap::new(),
            undelivered: BTreeSet::new(),
            links: BTreeMap::new(),
        }
    }

    fn push(&mut self, p: Pending, hold: Option<Hold>) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.undelivered.insert(seq);
        match hold {
            Some(h) => {
                self.held.insert(seq, (p, h));
            }
            None => self.make_ready(seq, p),
        }
    }

    fn make_ready(&mut self, seq: u64, p: Pending) {
        if self.policy == Policy::FifoPerLink {
            self.links.entry((p.src.0, p.dst.0)).or_default().insert(seq);
        }
        self.ready.insert(seq, p);
    }

    fn take(&mut self, seq: u64) -> Pending {
        self.undelivered.remove(&seq);
        if let Some((p, _)) = self.held.remove(&seq) {
            return p;
        }
        let p = self.ready.swap_remove(&seq).expect("undelivered message is ready or held");
        if let Some(link) = self.links.get_mut(&(p.src.0, p.dst.0)) {
            link.remove(&seq);
        }
        p
    }

    fn sent_at(&self, seq: u64) -> u64 {
        match self.ready.get(&seq) {
            Some(p) => p.sent_at,
            None => self.held[&seq].0.sent_at,
        }
    }

    /// Picks the next message to deliver at `step`.
    fn next(&mut self, step: u64, rng: &mut ChaCha8Rng) -> Option<Pending> {
        let oldest = *self.undelivered.first()?;
        if step.saturating_sub(self.sent_at(oldest)) >= self.debt || self.ready.is_empty() {
            return Some(self.take(oldest));
        }
        let i = rng.gen_range(0..self.ready.len());
        let (&seq, p) = self.ready.get_index(i).expect("index in range");
        let seq = match self.policy {
            Policy::FifoPerLink => *self.links[&(p.src.0, p.dst.0)].first().expect("link holds the message"),
            _ => seq,
        };
        Some(self.take(seq))
    }

    /// The destination proposed in `round` for `queue` at slot `head`.
    fn arm(&mut self, dst: ReplicaId, round: u64, queue: ReplicaId, head: u64) {
        for (p, h) in self.held.values_mut() {
            if p.dst == dst && h.origin == queue && h.priority == head && h.armed.is_none() {
                h.armed = Some(round);
            }
        }
    }

    fn release(&mut self, dst: ReplicaId, round: u64) {
        let due: Vec<u64> = self
            .held
            .iter()
            .filter(|(_, (p, h))| p.dst == dst && h.armed.is_some_and(|r| r <= round))
            .map(|(s, _)| *s)
            .collect();
        for seq in due {
            let (p, _) = self.held.remove(&seq).expect("listed above");
            self.make_ready(seq, p);
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Action {
    Submit(ReplicaId),
    Flush(ReplicaId),
}

/// Generates client submissions.
struct Injector {
    workload: Workload,
    n: usize,
    batch_size: usize,
    immediate: VecDeque<Action>,
    next_rate: usize,
    batches: Vec<usize>,
}

impl Injector {
    fn new(spec: &RunSpec) -> Self {
        let n = spec.n;
        let mut inj = Injector {
            workload: spec.workload.clone(),
            n,
            batch_size: spec.batch_size,
            immediate: VecDeque::new(),
            next_rate: 0,
            batches: vec![0; n],
        };
        match spec.workload {
            Workload::SingleShot { count } => {
                for k in 0..count {
                    inj.immediate.push_back(Action::Submit(ReplicaId((k % n) as u32)));
                }
                inj.push_flushes();
            }
            Workload::FixedRate { .. } => {}
            Workload::FullLoad { outstanding, .. } => {
                for _ in 0..outstanding {
                    for r in 0..n as u32 {
                        inj.push_batch(ReplicaId(r));
                    }
                }
            }
        }
        inj
    }

    fn push_flushes(&mut self) {
        if self.batch_size > 1 {
            for r in 0..self.n as u32 {
                self.immediate.push_back(Action::Flush(ReplicaId(r)));
            }
        }
    }

    fn push_batch(&mut self, r: ReplicaId) {
        let Workload::FullLoad { batches, .. } = self.workload else { return };
        if self.batches[r.index()] < batches {
            self.batches[r.index()] += 1;
            for _ in 0..self.batch_size {
                self.immediate.push_back(Action::Submit(r));
            }
        }
    }

    /// Next action due at `step`; `force` ignores the rate schedule.
    fn next(&mut self, step: u64, force: bool) -> Option<Action> {
        if let Some(a) = self.immediate.pop_front() {
            return Some(a);
        }
        if let Workload::FixedRate { every, count } = self.workload {
            if self.next_rate < count && (force || step >= self.next_rate as u64 * every) {
                let r = ReplicaId((self.next_rate % self.n) as u32);
                self.next_rate += 1;
                if self.next_rate == count {
                    self.push_flushes();
                }
                return Some(Action::Submit(r));
            }
        }
        None
    }

    fn has_future(&self) -> bool {
        match self.workload {
            Workload::FixedRate { count, .. } => self.next_rate < count,
            _ => false,
        }
    }

    fn exhausted(&self, correct: &[ReplicaId]) -> bool {
        if !self.immediate.is_empty() || self.has_future() {
            return false;
        }
        match self.workload {
            Workload::FullLoad { batches, .. } => correct.iter().all(|r| self.batches[r.index()] >= batches),
            _ => true,
        }
    }
}

/// Per-step accumulator for the step record.
#[derive(Default)]
struct StepOut {
    sent: BTreeMap<MessageKind, u32>,
    hasher: Sha256,
}

pub struct Simulation {
    spec: RunSpec,
    cfg: Config,
    replicas: Vec<ReplicaState>,
    behaviors: Vec<Option<Behavior>>,
    crash_at: Vec<u64>,
    correct: Vec<ReplicaId>,
    attacked: Vec<ReplicaId>,
    net: Network,
    rng: ChaCha8Rng,
    fuzz_rng: ChaCha8Rng,
    injector: Injector,
    tx_counter: Vec<u64>,
    step: u64,
    records: Vec<Record>,
    hasher: TraceHasher,
    correct_injected: HashSet<Digest>,
    delivered_correct: Vec<usize>,
    output_len: Vec<usize>,
}

/// Runs a scenario to completion and returns its trace.
pub fn run(spec: &RunSpec) -> Result<Trace, ScenarioError> {
    let mut sim = Simulation::new(spec)?;
    sim.run_to_end();
    Ok(sim.into_trace())
}

impl Simulation {
    pub fn new(spec: &RunSpec) -> Result<Self, ScenarioError> {
        let cfg = spec.validate()?;
        let keys = KeySet::for_config(&cfg, spec.seed).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        let mut crash_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ CRASH_SALT);
        let behaviors: Vec<Option<Behavior>> = cfg.replicas().map(|r| spec.faults.behavior_of(r)).collect();
        let crash_at = behaviors
            .iter()
            .map(|b| if *b == Some(Behavior::Crash) { crash_rng.gen_range(0..CRASH_WINDOW) } else { u64::MAX })
            .collect();
        let mut sim = Simulation {
            spec: spec.clone(),
            cfg,
            replicas: Vec::with_capacity(cfg.n),
            behaviors,
            crash_at,
            correct: spec.correct(),
            attacked: spec.policy.attacked(cfg.n),
            net: Network::new(spec.policy.clone(), spec.fairness_debt.max(1)),
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            fuzz_rng: ChaCha8Rng::seed_from_u64(spec.seed ^ FUZZ_SALT),
            injector: Injector::new(spec),
            tx_counter: vec![0; cfg.n],
            step: 0,
            records: Vec::new(),
            hasher: TraceHasher::new(spec),
            correct_injected: HashSet::new(),
            delivered_correct: vec![0; cfg.n],
            output_len: vec![0; cfg.n],
        };
        let mut starts = Vec::with_capacity(cfg.n);
        for id in cfg.replicas() {
            let k = keys.replica(id).expect("dealt for every replica");
            let (st, out) = ReplicaState::start(id, cfg, k).map_err(|e| ScenarioError::Parse(e.to_string()))?;
            sim.replicas.push(st);
            starts.push(out);
        }
        for (i, out) in starts.into_iter().enumerate() {
            let id = ReplicaId(i as u32);
            let out = if sim.ignores(id) { ReplicaOutput::default() } else { out };
            sim.finish_step(id, Input::Start, out);
        }
        Ok(sim)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn replicas(&self) -> &[ReplicaState] {
        &self.replicas
    }

    fn ignores(&self, id: ReplicaId) -> bool {
        match self.behaviors[id.index()] {
            Some(Behavior::Silent) => true,
            Some(Behavior::Crash) => self.step >= self.crash_at[id.index()],
            _ => false,
        }
    }

    /// Every transaction injected at a correct replica has been delivered by
    /// every correct replica, and the correct output streams have equal length.
    pub fn is_quiescent(&self) -> bool {
        if !self.injector.exhausted(&self.correct) {
            return false;
        }
        let want = self.correct_injected.len();
        let first = self.correct.first().map(|r| self.output_len[r.index()]);
        self.correct
            .iter()
            .all(|r| self.delivered_correct[r.index()] == want && Some(self.output_len[r.index()]) == first)
    }

    pub fn run_to_end(&mut self) {
        let stop = self.spec.stop;
        while self.step < stop.cap() {
            if matches!(stop, Stop::Quiescence { .. }) && self.is_quiescent() {
                break;
            }
            if !self.advance() {
                break;
            }
        }
    }

    /// Processes one step. Returns false when nothing is left to do.
    pub fn advance(&mut self) -> bool {
        if let Some(a) = self.injector.next(self.step, false) {
            self.act(a);
            return true;
        }
        if let Some(p) = self.net.next(self.step, &mut self.rng) {
            self.deliver(p);
            return true;
        }
        if let Some(a) = self.injector.next(self.step, true) {
            self.act(a);
            return true;
        }
        false
    }

    fn act(&mut self, a: Action) {
        match a {
            Action::Submit(r) => {
                let k = self.tx_counter[r.index()];
                self.tx_counter[r.index()] += 1;
                let valid = self.behaviors[r.index()] != Some(Behavior::InvalidProposer);
                let prefix = if valid { format!("tx/{}/{k}/", r.0) } else { format!("INVALID/{}/{k}/", r.0) };
                let mut payload = prefix.into_bytes();
                if payload.len() < self.cfg.tx_size {
                    payload.resize(self.cfg.tx_size, b'.');
                }
                let m = ClientMessage::new(payload);
                if self.behaviors[r.index()].is_none() {
                    self.correct_injected.insert(m.id());
                }
                let input = Input::Submit { tx: m.id(), valid };
                let out = if self.ignores(r) {
                    ReplicaOutput::default()
                } else {
                    self.replicas[r.index()].handle(ReplicaEvent::ClientSubmit(m))
                };
                self.finish_step(r, input, out);
            }
            Action::Flush(r) => {
                let out = if self.ignores(r) {
                    ReplicaOutput::default()
                } else {
                    self.replicas[r.index()].handle(ReplicaEvent::HarnessFlush)
                };
                self.finish_step(r, Input::Flush, out);
            }
        }
    }

    fn deliver(&mut self, p: Pending) {
        let input = Input::Message {
            src: p.src,
            kind: if p.bytes.len() > 1 { p.bytes[1] } else { 0 },
            digest: Digest::of(&p.bytes),
        };
        let out = if self.ignores(p.dst) {
            ReplicaOutput::default()
        } else {
            self.replicas[p.dst.index()].handle(ReplicaEvent::Receive { from: p.src, bytes: p.bytes })
        };
        self.finish_step(p.dst, input, out);
    }

    fn finish_step(&mut self, at: ReplicaId, input: Input, out: ReplicaOutput) {
        let step = self.step;
        let mut acc = StepOut::default();
        let behavior = self.behaviors[at.index()];
        for (target, msg) in out.outbound {
            let dests: Vec<ReplicaId> = match target {
                Target::All => self.cfg.replicas().collect(),
                Target::Node(d) => vec![d],
            };
            let kind = msg.kind();
            let plain = encode(&msg);
            for d in dests {
                let bytes = match behavior {
                    Some(Behavior::Equivocator) if kind == MessageKind::VcbcSend && d != at && d.index() >= self.cfg.n / 2 => {
                        encode(&equivocate(&msg))
                    }
                    Some(Behavior::Fuzzer) if d != at => fuzz(&mut self.fuzz_rng, &msg, &plain, self.cfg.n),
                    _ => plain.clone(),
                };
                *acc.sent.entry(kind).or_default() += 1;
                acc.hasher.update(d.0.to_be_bytes());
                acc.hasher.update((bytes.len() as u32).to_be_bytes());
                acc.hasher.update(&bytes);
                let hold = self.hold_for(at, d, &msg);
                self.net.push(Pending { src: at, dst: d, bytes, sent_at: step }, hold);
            }
        }
        for m in &out.delivered {
            acc.hasher.update(m.id().0);
            self.output_len[at.index()] += 1;
            if self.correct_injected.contains(&m.id()) {
                self.delivered_correct[at.index()] += 1;
            }
        }
        let rec = Record::Step(StepRecord {
            step,
            replica: at,
            input,
            sent: acc.sent.into_iter().collect(),
            out_digest: Digest(acc.hasher.finalize().into()),
        });
        self.push_record(rec);
        for event in out.events {
            self.observe(at, &event);
            self.push_record(Record::Event { step, replica: at, event });
        }
        self.step += 1;
    }

    fn hold_for(&self, from: ReplicaId, to: ReplicaId, msg: &ProtocolMessage) -> Option<Hold> {
        let Body::VcbcFinal(m) = &msg.body else { return None };
        if m.id.origin != from || !self.attacked.contains(&from) {
            return None;
        }
        let n = self.cfg.n as u32;
        let span = (self.cfg.n - self.cfg.f) as u32;
        let offset = (to.0 + n - from.0) % n;
        (1..=span).contains(&offset).then_some(Hold { origin: from, priority: m.id.priority, armed: None })
    }

    fn observe(&mut self, at: ReplicaId, event: &ProtocolEvent) {
        match *event {
            ProtocolEvent::AbaProposed { round, queue, head, .. } => self.net.arm(at, round, queue, head),
            ProtocolEvent::AbaDecided { round, .. } => self.net.release(at, round),
            ProtocolEvent::BatchDelivered { queue, .. } if queue == at => self.injector.push_batch(at),
            _ => {}
        }
    }

    fn push_record(&mut self, rec: Record) {
        self.hasher.record(&rec);
        self.records.push(rec);
    }

    pub fn into_trace(self) -> Trace {
        let snapshots = self
            .replicas
            .iter()
            .map(|r| Snapshot {
                replica: r.id(),
                round: r.round(),
                delivered: r.delivered().len() as u64,
                set_hash: r.delivered_hash(),
                violations: r.violations().values().sum(),
            })
            .collect();
        let outcome = Outcome { steps: self.step, quiescent: self.is_quiescent(), snapshots };
        let digest = self.hasher.finish(&outcome);
        Trace { manifest: self.spec, records: self.records, outcome, digest }
    }
}

/// The conflicting batch an equivocator sends to the upper half of the system.
fn equivocate(msg: &ProtocolMessage) -> ProtocolMessage {
    let Body::VcbcSend { id, payload } = &msg.body else { return msg.clone() };
    let mut entries = payload.entries().to_vec();
    entries.push(ClientMessage::new(format!("equivocation/{}/{}", id.origin.0, id.priority).into_bytes()));
    let alt = Batch::new(entries).unwrap_or_else(|_| payload.clone());
    ProtocolMessage::new(msg.sender, Body::VcbcSend { id: *id, payload: alt })
}

/// Half of the copies pass untouched, a quarter get a well-formed semantic
/// mutation and a quarter get raw byte corruption.
fn fuzz(rng: &mut ChaCha8Rng, msg: &ProtocolMessage, plain: &[u8], n: usize) -> Vec<u8> {
    match rng.gen_range(0..4) {
        0 | 1 => plain.to_vec(),
        2 => encode(&mutate(rng, msg, n)),
        _ => {
            let mut bytes = plain.to_vec();
            if rng.gen_bool(0.25) {
                let cut = rng.gen_range(0..bytes.len());
                bytes.truncate(cut);
            } else {
                for _ in 0..rng.gen_range(1..=3) {
                    let i = rng.gen_range(0..bytes.len());
                    bytes[i] ^= rng.gen_range(1..=255u8);
                }
            }
            bytes
        }
    }
}

fn mutate(rng: &mut ChaCha8Rng, msg: &ProtocolMessage, n: usize) -> ProtocolMessage {
    let mut m = msg.clone();
    if rng.gen_bool(0.1) {
        m.sender = ReplicaId(rng.gen_range(0..n as u32));
        return m;
    }
    let flip = |rng: &mut ChaCha8Rng, v: &mut Vec<u8>| {
        if v.is_empty() {
            v.push(rng.gen());
        } else {
            let i = rng.gen_range(0..v.len());
            v[i] ^= 1 << rng.gen_range(0..8);
        }
    };
    match &mut m.body {
        Body::VcbcSend { id, payload } => {
            if rng.gen_bool(0.5) {
                id.priority = id.priority.wrapping_add(rng.gen_range(1..3));
            } else {
                let mut entries = payload.entries().to_vec();
                entries.push(ClientMessage::new(format!("fuzz/{}", rng.gen::<u32>()).into_bytes()));
                if let Ok(b) = Batch::new(entries) {
                    *payload = b;
                }
            }
        }
        Body::VcbcEchoShare { id, share } => {
            if rng.gen_bool(0.5) {
                flip(rng, &mut share.value);
            } else {
                id.priority = id.priority.wrapping_add(1);
            }
        }
        Body::VcbcFinal(vm) => match rng.gen_range(0..3) {
            0 => flip(rng, &mut vm.proof.value),
            1 => vm.id.priority = vm.id.priority.wrapping_add(1),
            _ => {
                let mut entries = vm.payload.entries().to_vec();
                entries.reverse();
                if let Ok(b) = Batch::new(entries) {
                    vm.payload = b;
                }
                flip(rng, &mut vm.proof.value);
            }
        },
        Body::Aba { round, msg } => {
            if rng.gen_bool(0.2) {
                *round = round.wrapping_add(rng.gen_range(1..3));
            } else {
                match msg {
                    AbaMessage::Bval { value, .. } | AbaMessage::Aux { value, .. } | AbaMessage::Finish { value } => {
                        *value = !*value
                    }
                    AbaMessage::Conf { values, .. } => {
                        *values = BinSet::from_mask(rng.gen_range(0..4)).expect("mask below 4");
                    }
                    AbaMessage::CoinShare { share, .. } => flip(rng, &mut share.value),
                }
            }
        }
        Body::FillGap { slot, .. } => *slot = slot.wrapping_add(rng.gen_range(1..4)),
        Body::Filler { queue, entries } => {
            if rng.gen_bool(0.5) || entries.is_empty() {
                *queue = ReplicaId((queue.0 + 1) % n as u32);
            } else {
                let i = rng.gen_range(0..entries.len());
                flip(rng, &mut entries[i].proof.value);
            }
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::Faults;

    #[test]
    fn basic_run_quiesces() {
        let spec = RunSpec::basic(4, 1, 7);
        let t = run(&spec).unwrap();
        assert!(t.outcome.quiescent);
        let d = &t.outcome.snapshots[0];
        assert!(t.outcome.snapshots.iter().all(|s| s.set_hash == d.set_hash && s.delivered == d.delivered));
        assert_eq!(d.delivered, 16);
    }

    #[test]
    fn same_spec_same_digest() {
        let mut spec = RunSpec::basic(4, 2, 3);
        spec.policy = Policy::FifoPerLink;
        assert_eq!(run(&spec).unwrap().digest, run(&spec).unwrap().digest);
        let mut other = spec.clone();
        other.seed = 4;
        assert_ne!(run(&spec).unwrap().digest, run(&other).unwrap().digest);
    }

    #[test]
    fn silent_replica_does_not_block_others() {
        let mut spec = RunSpec::basic(4, 1, 11);
        spec.faults = Faults::last(4, 1, Behavior::Silent);
        let t = run(&spec).unwrap();
        assert!(t.outcome.quiescent);
        assert_eq!(t.outcome.snapshots[3].delivered, 0);
    }

    #[test]
    fn fairness_debt_bounds_message_age() {
        let mut spec = RunSpec::basic(4, 1, 5);
        spec.policy = Policy::AdversarialVcbcDelay { target_fraction: 0.25 };
        spec.fairness_debt = 50;
        let mut sim = Simulation::new(&spec).unwrap();
        let mut worst = 0;
        while sim.step() < 20_000 && sim.advance() {
            if let Some(&oldest) = sim.net.undelivered.first() {
                worst = worst.max(sim.step() - sim.net.sent_at(oldest));
            }
        }
        // Messages that fall due together leave one per step.
        assert!((50..50 + 64).contains(&worst), "worst age {worst}");
    }
}
