//! Per-origin slot queue with write-once slots, permanent tombstones and a head
//! pointer at the lowest slot that has not been removed.

use std::collections::{BTreeMap, BTreeSet};

use crate::types::{Batch, Digest, ReplicaId};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SlotState {
    Empty,
    Filled(Batch),
    Used,
}

#[derive(Clone, Debug)]
pub struct PriorityQueue {
    id: ReplicaId,
    /// Filled or Used slots at or above `head`; anything below `head` is Used.
    slots: BTreeMap<u64, SlotState>,
    /// Where each filled digest currently sits.
    index: BTreeMap<Digest, BTreeSet<u64>>,
    head: u64,
}

impl PriorityQueue {
    pub fn new(id: ReplicaId) -> Self {
        PriorityQueue { id, slots: BTreeMap::new(), index: BTreeMap::new(), head: 0 }
    }

    pub fn id(&self) -> ReplicaId {
        self.id
    }

    pub fn head(&self) -> u64 {
        self.head
    }

    pub fn slot(&self, s: u64) -> SlotState {
        if s < self.head {
            return SlotState::Used;
        }
        self.slots.get(&s).cloned().unwrap_or(SlotState::Empty)
    }

    /// Stores `v` at slot `s` if that slot is empty. Returns whether it was stored.
    pub fn enqueue(&mut self, s: u64, v: Batch) -> bool {
        if s < self.head || self.slots.contains_key(&s) {
            return false;
        }
        self.index.entry(v.digest()).or_default().insert(s);
        self.slots.insert(s, SlotState::Filled(v));
        true
    }

    /// Marks every slot holding a batch equal to `v` as used.
    pub fn dequeue(&mut self, v: &Batch) {
        self.dequeue_digest(&v.digest());
    }

    pub fn dequeue_digest(&mut self, d: &Digest) {
        let Some(positions) = self.index.remove(d) else { return };
        for s in positions {
            self.slots.insert(s, SlotState::Used);
        }
        self.advance();
    }

    fn advance(&mut self) {
        while let Some(SlotState::Used) = self.slots.get(&self.head) {
            self.slots.remove(&self.head);
            self.head += 1;
        }
    }

    /// The batch at the head slot, if it is filled.
    pub fn peek(&self) -> Option<&Batch> {
        match self.slots.get(&self.head) {
            Some(SlotState::Filled(b)) => Some(b),
            _ => None,
        }
    }

    /// Filled slots, in priority order.
    pub fn filled(&self) -> impl Iterator<Item = (u64, &Batch)> {
        self.slots.iter().filter_map(|(s, st)| match st {
            SlotState::Filled(b) => Some((*s, b)),
            _ => None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ClientMessage;

    fn batch(s: &str) -> Batch {
        Batch::new(vec![ClientMessage::new(s.as_bytes().to_vec())]).unwrap()
    }

    #[test]
    fn fresh_queue_enqueue_peek() {
        let mut q = PriorityQueue::new(ReplicaId(0));
        assert!(q.peek().is_none());
        q.enqueue(0, batch("a"));
        assert_eq!(q.peek(), Some(&batch("a")));
    }

    #[test]
    fn used_slot_is_permanent() {
        let mut q = PriorityQueue::new(ReplicaId(0));
        q.enqueue(0, batch("a"));
        q.dequeue(&batch("a"));
        assert!(!q.enqueue(0, batch("b")));
        assert_eq!(q.slot(0), SlotState::Used);
        assert_eq!(q.head(), 1);
        assert!(q.peek().is_none());
    }

    #[test]
    fn head_does_not_skip_empty() {
        let mut q = PriorityQueue::new(ReplicaId(0));
        q.enqueue(5, batch("a"));
        assert!(q.peek().is_none());
        q.enqueue(1, batch("b"));
        assert!(q.peek().is_none());
        assert_eq!(q.head(), 0);
    }

    #[test]
    fn dequeue_removes_all_instances() {
        let mut q = PriorityQueue::new(ReplicaId(0));
        q.enqueue(0, batch("a"));
        q.enqueue(2, batch("a"));
        q.dequeue(&batch("a"));
        assert_eq!(q.slot(0), SlotState::Used);
        assert_eq!(q.slot(2), SlotState::Used);
        assert_eq!(q.head(), 1);
        q.dequeue(&batch("zzz"));
        assert_eq!(q.head(), 1);
    }

    #[test]
    fn head_skips_used_run() {
        let mut q = PriorityQueue::new(ReplicaId(0));
        q.enqueue(1, batch("b"));
        q.enqueue(2, batch("c"));
        q.dequeue(&batch("b"));
        assert_eq!(q.head(), 0);
        q.enqueue(0, batch("a"));
        q.dequeue(&batch("a"));
        assert_eq!(q.head(), 2);
        assert_eq!(q.peek(), Some(&batch("c")));
    }
}
