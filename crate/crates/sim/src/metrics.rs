//! Metrics computed from a trace. Time is measured in scheduler steps.

use std::collections::{BTreeMap, HashMap};

use abcast_core::message::MessageKind;
use abcast_core::types::{queue_map, Digest, ReplicaId};
use abcast_core::ProtocolEvent;
use serde::Serialize;

use crate::trace::{Input, Trace};

/// Size of a threshold signature or share on the wire, in bits.
pub const LAMBDA_BITS: u32 = (abcast_core::tcrypto::SIGNATURE_BYTES * 8) as u32;

#[derive(Clone, Debug, Default, Serialize)]
pub struct SlotSigma {
    pub queue: u32,
    pub slot: u64,
    pub round: u64,
    pub sigma: u32,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Metrics {
    pub steps: u64,
    pub quiescent: bool,
    pub correct: usize,
    /// Point-to-point messages sent by each correct replica, by kind name.
    pub messages_sent: BTreeMap<u32, BTreeMap<String, u64>>,
    pub messages_total: u64,
    /// Agreement messages per correct replica per agreement round, divided by n.
    pub aba_messages_per_peer: Option<f64>,
    pub batches_delivered: u64,
    pub txs_delivered: u64,
    pub valid_txs_delivered: u64,
    /// Messages sent per correct replica per delivered batch.
    pub messages_per_batch: Option<f64>,
    pub sigma_per_slot: Vec<SlotSigma>,
    pub sigma_mean: Option<f64>,
    pub sigma_by_queue: BTreeMap<u32, f64>,
    pub latency_steps: Vec<u64>,
    pub latency_mean: Option<f64>,
    /// Valid transactions delivered per 1000 steps.
    pub goodput: f64,
    /// Batches delivered per 1000 steps.
    pub throughput: f64,
    pub rounds: u64,
    pub aba_internal_mean: Option<f64>,
    pub aba_internal_max: u32,
    pub violations_at_correct: u64,
    pub lambda_bits: u32,
}

pub fn measure(trace: &Trace) -> Metrics {
    let spec = &trace.manifest;
    let n = spec.n;
    let correct = spec.correct();
    let is_correct = |r: ReplicaId| r.index() < n && spec.faults.is_correct(r);
    let steps = trace.outcome.steps;
    let mut m = Metrics {
        steps,
        quiescent: trace.outcome.quiescent,
        correct: correct.len(),
        lambda_bits: LAMBDA_BITS,
        ..Metrics::default()
    };
    let Some(&lead) = correct.first() else { return m };

    let mut submitted: HashMap<Digest, (u64, bool)> = HashMap::new();
    for s in trace.steps() {
        if let Input::Submit { tx, valid } = s.input {
            submitted.entry(tx).or_insert((s.step, valid));
        }
        if is_correct(s.replica) {
            let per = m.messages_sent.entry(s.replica.0).or_default();
            for (kind, c) in &s.sent {
                *per.entry(kind.name().to_string()).or_default() += *c as u64;
                m.messages_total += *c as u64;
            }
        }
    }
    for r in &correct {
        let per = m.messages_sent.entry(r.0).or_default();
        for k in MessageKind::ALL {
            per.entry(k.name().to_string()).or_default();
        }
    }

    // Slots proposed with a value, by round, among correct replicas.
    let mut proposed: HashMap<u64, Vec<u64>> = HashMap::new();
    let mut deliveries: BTreeMap<(ReplicaId, u64), Vec<u64>> = BTreeMap::new();
    let mut lead_batches: Vec<(u64, ReplicaId, u64)> = Vec::new();
    let mut batch_ready: HashMap<(ReplicaId, u64), u64> = HashMap::new();
    let mut current: Option<(ReplicaId, u64)> = None;
    let mut internal = Vec::new();
    for (step, at, event) in trace.events() {
        if !is_correct(at) {
            continue;
        }
        match *event {
            ProtocolEvent::AbaProposed { round, head, value: Some(_), .. } => {
                let heads = proposed.entry(round).or_default();
                if !heads.contains(&head) {
                    heads.push(head);
                }
            }
            ProtocolEvent::BatchDelivered { round, queue, slot, .. } => {
                deliveries.entry((queue, slot)).or_default().push(step);
                if at == lead {
                    lead_batches.push((round, queue, slot));
                    current = Some((queue, slot));
                }
            }
            ProtocolEvent::Output { tx, .. } if at == lead => {
                m.txs_delivered += 1;
                let known = submitted.get(&tx);
                if known.is_some_and(|(_, valid)| *valid) {
                    m.valid_txs_delivered += 1;
                }
                if let (Some(key), Some((s, _))) = (current, known) {
                    let e = batch_ready.entry(key).or_insert(0);
                    *e = (*e).max(*s);
                }
            }
            ProtocolEvent::AbaDecided { internal_round, .. } if at == lead => internal.push(internal_round + 1),
            ProtocolEvent::RoundEntered { .. } if at == lead => m.rounds += 1,
            ProtocolEvent::Violation { .. } => m.violations_at_correct += 1,
            _ => {}
        }
    }
    m.batches_delivered = lead_batches.len() as u64;

    let mut last_round: HashMap<ReplicaId, u64> = HashMap::new();
    for &(round, queue, slot) in &lead_batches {
        let from = last_round.get(&queue).map_or(0, |r| r + 1);
        let wasted = (from..round)
            .filter(|&r| queue_map(r, n) == queue && proposed.get(&r).is_some_and(|h| h.contains(&slot)))
            .count() as u32;
        last_round.insert(queue, round);
        m.sigma_per_slot.push(SlotSigma { queue: queue.0, slot, round, sigma: 1 + wasted });
    }
    m.sigma_mean = mean(m.sigma_per_slot.iter().map(|s| s.sigma as f64));
    let mut by_queue: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for s in &m.sigma_per_slot {
        by_queue.entry(s.queue).or_default().push(s.sigma as f64);
    }
    m.sigma_by_queue = by_queue.into_iter().filter_map(|(q, v)| mean(v.into_iter()).map(|x| (q, x))).collect();

    let need = n - spec.f;
    for &(_, queue, slot) in &lead_batches {
        let (Some(ready), Some(done)) = (batch_ready.get(&(queue, slot)), deliveries.get(&(queue, slot))) else {
            continue;
        };
        if let Some(&at) = done.get(need - 1) {
            m.latency_steps.push(at.saturating_sub(*ready));
        }
    }
    m.latency_mean = mean(m.latency_steps.iter().map(|&x| x as f64));
    let aba: u64 = m
        .messages_sent
        .values()
        .flat_map(|per| per.iter())
        .filter(|(k, _)| MessageKind::ALL.iter().any(|x| x.is_aba() && x.name() == k.as_str()))
        .map(|(_, c)| *c)
        .sum();
    if m.rounds > 0 {
        m.aba_messages_per_peer = Some(aba as f64 / correct.len() as f64 / m.rounds as f64 / n as f64);
    }
    if m.batches_delivered > 0 {
        m.messages_per_batch = Some(m.messages_total as f64 / correct.len() as f64 / m.batches_delivered as f64);
    }
    if steps > 0 {
        m.goodput = m.valid_txs_delivered as f64 * 1000.0 / steps as f64;
        m.throughput = m.batches_delivered as f64 * 1000.0 / steps as f64;
    }
    m.aba_internal_mean = mean(internal.iter().map(|&x| x as f64));
    m.aba_internal_max = internal.iter().copied().max().unwrap_or(0);
    m
}

pub fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    (count > 0).then(|| sum / count as f64)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Closed-form messages per replica per delivered batch: three broadcast
/// messages plus `a·n` agreement messages for each of the `sigma` rounds spent
/// on the slot.
pub fn analytic_messages_per_batch(n: usize, sigma: f64, aba_per_peer: f64) -> f64 {
    3.0 + sigma * aba_per_peer * n as f64
}
