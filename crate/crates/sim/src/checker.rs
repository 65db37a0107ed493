//! Offline safety checks over a recorded trace.
//!
//! Every predicate only looks at correct replicas. Faulty replicas may record
//! anything.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use abcast_core::types::{queue_map, Digest, ReplicaId};
use abcast_core::ProtocolEvent;

use crate::trace::Trace;

/// Stop collecting details after this many findings.
const MAX_FINDINGS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Property {
    /// The stored digest matches the contents.
    Digest,
    /// No correct replica outputs a transaction twice.
    Integrity,
    /// Correct output streams are prefixes of one another.
    TotalOrder,
    /// At quiescence all correct replicas output the same stream.
    Agreement,
    /// One digest per broadcast instance among correct replicas.
    VcbcConsistency,
    /// One decision per agreement round among correct replicas.
    AbaAgreement,
    /// A round on which every correct replica proposed `b` decides `b`.
    AbaValidity,
    /// Rounds are entered in order, each after the previous one decided.
    RoundOrder,
    /// Correct replicas enter each round with equal delivered sets.
    ConsensusHolds,
    /// A proposal of a value is backed by local broadcast deliveries of every
    /// slot up to the head, and names the value delivered at the head.
    Prepared,
    /// Correct proposals for the same queue slot name the same value.
    PreparedConsistency,
    /// Correct replicas deliver the same batch in a round decided 1 and none
    /// in a round decided 0.
    RoundDelivery,
    /// When every correct replica proposed the same value for a round, that
    /// value is delivered in it.
    PreparedDelivery,
}

impl Property {
    pub fn name(self) -> &'static str {
        match self {
            Property::Digest => "digest",
            Property::Integrity => "integrity",
            Property::TotalOrder => "total_order",
            Property::Agreement => "agreement",
            Property::VcbcConsistency => "vcbc_consistency",
            Property::AbaAgreement => "aba_agreement",
            Property::AbaValidity => "aba_validity",
            Property::RoundOrder => "round_order",
            Property::ConsensusHolds => "consensus_holds",
            Property::Prepared => "prepared",
            Property::PreparedConsistency => "prepared_consistency",
            Property::RoundDelivery => "round_delivery",
            Property::PreparedDelivery => "prepared_delivery",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Finding {
    pub property: Property,
    pub detail: String,
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub findings: Vec<Finding>,
    /// Total number of findings, including those beyond the detail cap.
    pub total: usize,
    pub quiescent: bool,
}

impl Report {
    pub fn ok(&self) -> bool {
        self.total == 0
    }

    fn add(&mut self, property: Property, detail: String) {
        self.total += 1;
        if self.findings.len() < MAX_FINDINGS {
            self.findings.push(Finding { property, detail });
        }
    }

    pub fn violated(&self) -> Vec<Property> {
        let mut v: Vec<Property> = self.findings.iter().map(|f| f.property).collect();
        v.sort();
        v.dedup();
        v
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.ok() {
            return write!(f, "all properties hold (quiescent: {})", self.quiescent);
        }
        writeln!(f, "{} violation(s)", self.total)?;
        for x in &self.findings {
            writeln!(f, "  {}: {}", x.property.name(), x.detail)?;
        }
        Ok(())
    }
}

#[derive(Default)]
struct ReplicaView {
    outputs: Vec<Digest>,
    seen: HashSet<Digest>,
    round: Option<u64>,
    decided: BTreeMap<u64, bool>,
    vcbc: BTreeMap<(ReplicaId, u64), Digest>,
}

#[derive(Default)]
struct RoundView {
    entered: BTreeMap<ReplicaId, (u64, Digest)>,
    proposals: BTreeMap<ReplicaId, Option<(u64, Digest)>>,
    decisions: BTreeMap<ReplicaId, bool>,
    deliveries: BTreeMap<ReplicaId, (ReplicaId, u64, Digest)>,
}

pub fn check(trace: &Trace) -> Report {
    let spec = &trace.manifest;
    let n = spec.n;
    let correct: Vec<ReplicaId> = spec.correct();
    let is_correct = |r: ReplicaId| r.index() < n && spec.faults.is_correct(r);
    let mut report = Report { quiescent: trace.outcome.quiescent, ..Report::default() };

    if trace.recompute_digest() != trace.digest {
        report.add(Property::Digest, "stored digest does not match the trace contents".into());
    }

    let mut views: Vec<ReplicaView> = (0..n).map(|_| ReplicaView::default()).collect();
    let mut rounds: BTreeMap<u64, RoundView> = BTreeMap::new();
    let mut instances: BTreeMap<(ReplicaId, u64), (ReplicaId, Digest)> = BTreeMap::new();
    let mut slots: BTreeMap<(ReplicaId, u64), (ReplicaId, Digest)> = BTreeMap::new();

    for (step, at, event) in trace.events() {
        if !is_correct(at) {
            continue;
        }
        let v = &mut views[at.index()];
        match *event {
            ProtocolEvent::RoundEntered { round, delivered_count, set_hash } => {
                let expected = v.round.map_or(0, |r| r + 1);
                if round != expected {
                    report.add(Property::RoundOrder, format!("{at} entered round {round} after {:?}", v.round));
                } else if round > 0 && !v.decided.contains_key(&(round - 1)) {
                    report.add(Property::RoundOrder, format!("{at} entered round {round} before deciding {}", round - 1));
                }
                if delivered_count != v.outputs.len() as u64 {
                    report.add(
                        Property::ConsensusHolds,
                        format!("{at} reports {delivered_count} delivered at round {round} but output {}", v.outputs.len()),
                    );
                }
                v.round = Some(round);
                rounds.entry(round).or_default().entered.insert(at, (delivered_count, set_hash));
            }
            ProtocolEvent::AbaProposed { round, queue, head, value } => {
                if v.round != Some(round) || queue != queue_map(round, n) {
                    report.add(Property::RoundOrder, format!("{at} proposed for round {round} on {queue} out of turn"));
                }
                if let Some(d) = value {
                    let backed = (0..=head).all(|s| v.vcbc.contains_key(&(queue, s)));
                    if !backed || v.vcbc.get(&(queue, head)) != Some(&d) {
                        report.add(Property::Prepared, format!("{at} proposed {queue}/{head} at round {round} unprepared"));
                    }
                    match slots.get(&(queue, head)) {
                        Some((other, od)) if *od != d => report.add(
                            Property::PreparedConsistency,
                            format!("{at} and {other} prepared different values for {queue}/{head}"),
                        ),
                        Some(_) => {}
                        None => {
                            slots.insert((queue, head), (at, d));
                        }
                    }
                }
                rounds.entry(round).or_default().proposals.insert(at, value.map(|d| (head, d)));
            }
            ProtocolEvent::AbaDecided { round, value, .. } => {
                if v.decided.insert(round, value).is_some() {
                    report.add(Property::AbaAgreement, format!("{at} decided round {round} twice"));
                }
                if v.round.is_none_or(|r| round > r) {
                    report.add(Property::RoundOrder, format!("{at} decided round {round} before entering it"));
                }
                rounds.entry(round).or_default().decisions.insert(at, value);
            }
            ProtocolEvent::VcbcDelivered { origin, priority, digest } => {
                if v.vcbc.insert((origin, priority), digest).is_some() {
                    report.add(Property::VcbcConsistency, format!("{at} delivered {origin}/{priority} twice"));
                }
                match instances.get(&(origin, priority)) {
                    Some((other, d)) if *d != digest => report.add(
                        Property::VcbcConsistency,
                        format!("{at} and {other} delivered different values for {origin}/{priority}"),
                    ),
                    Some(_) => {}
                    None => {
                        instances.insert((origin, priority), (at, digest));
                    }
                }
            }
            ProtocolEvent::BatchDelivered { round, queue, slot, digest } => {
                if v.decided.get(&round) != Some(&true) || v.round != Some(round) {
                    report.add(Property::RoundDelivery, format!("{at} delivered a batch in round {round} without deciding 1"));
                }
                if v.vcbc.get(&(queue, slot)) != Some(&digest) {
                    report.add(Property::Prepared, format!("{at} delivered {queue}/{slot} without its broadcast"));
                }
                if rounds.entry(round).or_default().deliveries.insert(at, (queue, slot, digest)).is_some() {
                    report.add(Property::RoundDelivery, format!("{at} delivered twice in round {round}"));
                }
            }
            ProtocolEvent::Output { tx, .. } => {
                if !v.seen.insert(tx) {
                    report.add(Property::Integrity, format!("{at} output {tx:?} twice (step {step})"));
                }
                v.outputs.push(tx);
            }
            ProtocolEvent::Violation { .. } => {}
        }
    }

    let q = trace.manifest.config().map(|c| c.quorums().quorum).unwrap_or(n);
    for (&r, rv) in &rounds {
        let mut entered = rv.entered.iter();
        if let Some((first, e)) = entered.next() {
            for (other, e2) in entered {
                if e2 != e {
                    report.add(Property::ConsensusHolds, format!("{first} and {other} entered round {r} with different sets"));
                }
            }
        }
        let mut decisions = rv.decisions.values();
        if let Some(d) = decisions.next() {
            if decisions.any(|x| x != d) {
                report.add(Property::AbaAgreement, format!("correct replicas disagree on round {r}"));
            }
        }
        let mut deliveries = rv.deliveries.values();
        if let Some(d) = deliveries.next() {
            if deliveries.any(|x| x != d) {
                report.add(Property::RoundDelivery, format!("correct replicas delivered different batches in round {r}"));
            }
        }
        if rv.proposals.len() == correct.len() {
            let bits: HashSet<bool> = rv.proposals.values().map(Option::is_some).collect();
            if bits.len() == 1 {
                let b = bits.contains(&true);
                if rv.decisions.values().any(|&d| d != b) {
                    report.add(Property::AbaValidity, format!("round {r} decided against a unanimous {b}"));
                }
            }
            let values: HashSet<Option<(u64, Digest)>> = rv.proposals.values().copied().collect();
            if correct.len() >= q && values.len() == 1 {
                if let Some(Some((head, d))) = values.into_iter().next() {
                    let want = (queue_map(r, n), head, d);
                    if rv.deliveries.values().any(|x| *x != want)
                        || rv.decisions.keys().any(|p| !rv.deliveries.contains_key(p) && views[p.index()].round != Some(r))
                    {
                        report.add(Property::PreparedDelivery, format!("round {r} did not deliver the value all prepared"));
                    }
                }
            }
        }
    }

    for (i, a) in correct.iter().enumerate() {
        for b in &correct[i + 1..] {
            let (x, y) = (&views[a.index()].outputs, &views[b.index()].outputs);
            let k = x.len().min(y.len());
            if let Some(pos) = (0..k).find(|&j| x[j] != y[j]) {
                report.add(Property::TotalOrder, format!("{a} and {b} diverge at output {pos}"));
            } else if trace.outcome.quiescent && x.len() != y.len() {
                report.add(Property::Agreement, format!("{a} output {} but {b} output {}", x.len(), y.len()));
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::RunSpec;
    use crate::simnet;
    use crate::trace::Record;

    fn trace() -> Trace {
        simnet::run(&RunSpec::basic(4, 1, 2)).unwrap()
    }

    #[test]
    fn clean_run_passes() {
        let r = check(&trace());
        assert!(r.ok(), "{r}");
        assert!(r.quiescent);
    }

    #[test]
    fn tampering_breaks_the_digest() {
        let mut t = trace();
        t.outcome.steps += 1;
        assert_eq!(check(&t).violated(), vec![Property::Digest]);
    }

    #[test]
    fn reordered_outputs_break_total_order() {
        let mut t = trace();
        let at = ReplicaId(0);
        let idx: Vec<usize> = t
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| matches!(r, Record::Event { replica, event: ProtocolEvent::Output { .. }, .. } if *replica == at))
            .map(|(i, _)| i)
            .take(2)
            .collect();
        let (a, b) = (idx[0], idx[1]);
        let (ea, eb) = (t.records[a].clone(), t.records[b].clone());
        let swap = |from: &Record, to: &Record| match (from, to) {
            (Record::Event { event, .. }, Record::Event { step, replica, .. }) => {
                Record::Event { step: *step, replica: *replica, event: event.clone() }
            }
            _ => unreachable!(),
        };
        t.records[a] = swap(&eb, &ea);
        t.records[b] = swap(&ea, &eb);
        t.reseal();
        assert!(check(&t).violated().contains(&Property::TotalOrder));
    }

    #[test]
    fn forged_vcbc_delivery_is_caught() {
        let mut t = trace();
        let pos = t
            .records
            .iter()
            .position(|r| matches!(r, Record::Event { replica, event: ProtocolEvent::VcbcDelivered { .. }, .. } if replica.0 == 1))
            .unwrap();
        if let Record::Event { event: ProtocolEvent::VcbcDelivered { digest, .. }, .. } = &mut t.records[pos] {
            digest.0[0] ^= 1;
        }
        t.reseal();
        assert!(check(&t).violated().contains(&Property::VcbcConsistency));
    }
}
