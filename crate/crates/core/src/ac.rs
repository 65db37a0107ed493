//! Agreement component: one ABA per round over the queue selected by
//! `queue_map`, delivery of the decided head, and FILL-GAP recovery.
//!
//! The blocking waits of the round loop are encoded as an explicit phase; the
//! replica drives the transitions after every event.

use std::collections::BTreeSet;

use crate::pqueue::PriorityQueue;
use crate::types::{Batch, ClientMessage, Digest};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Proposing,
    AwaitingAba,
    /// The round decided 1 but the head slot here is empty.
    AwaitingValue,
}

#[derive(Clone, Debug)]
pub struct AcState {
    pub round: u64,
    pub phase: Phase,
}

impl Default for AcState {
    fn default() -> Self {
        AcState { round: 0, phase: Phase::Proposing }
    }
}

impl AcState {
    pub fn advance(&mut self) {
        self.round += 1;
        self.phase = Phase::Proposing;
    }
}

/// Removes `value` from every queue, then outputs its entries not yet in
/// `delivered`, in batch order.
pub fn ac_deliver(value: &Batch, queues: &mut [PriorityQueue], delivered: &mut BTreeSet<Digest>) -> Vec<ClientMessage> {
    for q in queues.iter_mut() {
        q.dequeue(value);
    }
    value.entries().iter().filter(|m| delivered.insert(m.id())).cloned().collect()
}

/// Tombstones every filled slot whose entries have all been delivered.
pub fn sweep_delivered(queues: &mut [PriorityQueue], delivered: &BTreeSet<Digest>) {
    for q in queues.iter_mut() {
        let done: Vec<Digest> = q
            .filled()
            .filter(|(_, b)| b.entries().iter().all(|m| delivered.contains(&m.id())))
            .map(|(_, b)| b.digest())
            .collect();
        for d in done {
            q.dequeue_digest(&d);
        }
    }
}

/// Priorities a FILLER should cover for a request at slot `s`, or `None` if
/// this replica has not reached `s` yet.
pub fn filler_range(queue: &PriorityQueue, s: u64) -> Option<std::ops::RangeInclusive<u64>> {
    (queue.head() >= s).then(|| s..=queue.head())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ReplicaId;

    fn msg(s: &str) -> ClientMessage {
        ClientMessage::new(s.as_bytes().to_vec())
    }

    fn batch(items: &[&str]) -> Batch {
        Batch::new(items.iter().map(|s| msg(s)).collect()).unwrap()
    }

    #[test]
    fn deliver_filters_known_entries() {
        let mut queues = vec![PriorityQueue::new(ReplicaId(0))];
        let mut s: BTreeSet<Digest> = [msg("a").id()].into();
        let out = ac_deliver(&batch(&["a", "b"]), &mut queues, &mut s);
        assert_eq!(out, vec![msg("b")]);
    }

    #[test]
    fn deliver_tombstones_copies_in_all_queues() {
        let b = batch(&["x"]);
        let mut queues: Vec<_> = (0..2).map(|i| PriorityQueue::new(ReplicaId(i))).collect();
        queues[0].enqueue(0, b.clone());
        queues[1].enqueue(0, b.clone());
        let mut s = BTreeSet::new();
        assert_eq!(ac_deliver(&b, &mut queues, &mut s).len(), 1);
        assert_eq!(queues[1].head(), 1);
    }

    #[test]
    fn sweep_removes_covered_batches() {
        let mut queues = vec![PriorityQueue::new(ReplicaId(0))];
        queues[0].enqueue(0, batch(&["a", "b"]));
        queues[0].enqueue(1, batch(&["c"]));
        let s: BTreeSet<Digest> = [msg("a").id(), msg("b").id()].into();
        sweep_delivered(&mut queues, &s);
        assert_eq!(queues[0].head(), 1);
        assert_eq!(queues[0].peek(), Some(&batch(&["c"])));
    }

    #[test]
    fn filler_range_rules() {
        let mut q = PriorityQueue::new(ReplicaId(0));
        assert_eq!(filler_range(&q, 2), None);
        for (i, s) in ["a", "b"].iter().enumerate() {
            q.enqueue(i as u64, batch(&[s]));
            q.dequeue(&batch(&[s]));
        }
        assert_eq!(filler_range(&q, 1), Some(1..=2));
    }
}
