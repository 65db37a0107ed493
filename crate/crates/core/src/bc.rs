//! Broadcast component: batches client messages and assigns consecutive local
//! priorities to the batches this replica disseminates.

use std::collections::BTreeSet;

use crate::pqueue::PriorityQueue;
use crate::types::{Batch, ClientMessage, Digest};

#[derive(Clone, Debug)]
pub struct BcState {
    batch_size: usize,
    buf: Vec<ClientMessage>,
    /// Every message this replica has ever put into one of its own batches.
    proposed: BTreeSet<Digest>,
    priority: u64,
}

impl BcState {
    pub fn new(batch_size: usize) -> Self {
        BcState { batch_size, buf: Vec::new(), proposed: BTreeSet::new(), priority: 0 }
    }

    /// Next priority to be used.
    pub fn priority(&self) -> u64 {
        self.priority
    }

    pub fn buffered(&self) -> &[ClientMessage] {
        &self.buf
    }

    /// Buffers `m` unless it is already delivered or already proposed by this
    /// replica. Returns a batch and its priority once the buffer is full.
    pub fn on_client_message(&mut self, m: ClientMessage, delivered: &BTreeSet<Digest>) -> Option<(u64, Batch)> {
        if delivered.contains(&m.id()) || !self.proposed.insert(m.id()) {
            return None;
        }
        self.buf.push(m);
        if self.buf.len() >= self.batch_size {
            self.flush()
        } else {
            None
        }
    }

    /// Cuts a batch from whatever is buffered. Harness use only: the protocol
    /// itself only cuts full batches.
    pub fn flush(&mut self) -> Option<(u64, Batch)> {
        if self.buf.is_empty() {
            return None;
        }
        let batch = Batch::new(std::mem::take(&mut self.buf)).expect("buffer is non-empty and deduplicated");
        let p = self.priority;
        self.priority += 1;
        Some((p, batch))
    }
}

/// Stores a VCBC output in its origin's queue, removing it again at once if
/// everything in it has already been delivered.
pub fn on_vcbc_output(queue: &mut PriorityQueue, priority: u64, batch: &Batch, delivered: &BTreeSet<Digest>) {
    queue.enqueue(priority, batch.clone());
    if batch.entries().iter().all(|m| delivered.contains(&m.id())) {
        queue.dequeue(batch);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ReplicaId;

    fn msg(s: &str) -> ClientMessage {
        ClientMessage::new(s.as_bytes().to_vec())
    }

    #[test]
    fn batch_of_one_goes_out_immediately() {
        let mut bc = BcState::new(1);
        let (p, b) = bc.on_client_message(msg("a"), &BTreeSet::new()).unwrap();
        assert_eq!(p, 0);
        assert_eq!(b.len(), 1);
        assert_eq!(bc.priority(), 1);
    }

    #[test]
    fn delivered_or_repeated_messages_are_ignored() {
        let mut bc = BcState::new(3);
        let s: BTreeSet<Digest> = [msg("a").id()].into();
        assert!(bc.on_client_message(msg("a"), &s).is_none());
        assert!(bc.on_client_message(msg("b"), &s).is_none());
        assert!(bc.on_client_message(msg("b"), &s).is_none());
        assert!(bc.on_client_message(msg("c"), &s).is_none());
        assert_eq!(bc.buffered().len(), 2);
        assert_eq!(bc.priority(), 0);
        let (_, b) = bc.on_client_message(msg("d"), &s).unwrap();
        assert_eq!(b.entries(), &[msg("b"), msg("c"), msg("d")]);
    }

    #[test]
    fn fully_delivered_output_is_tombstoned() {
        let b = Batch::new(vec![msg("a")]).unwrap();
        let mut q = PriorityQueue::new(ReplicaId(2));
        on_vcbc_output(&mut q, 0, &b, &[msg("a").id()].into());
        assert_eq!(q.head(), 1);
        let mut q = PriorityQueue::new(ReplicaId(2));
        on_vcbc_output(&mut q, 0, &b, &BTreeSet::new());
        assert_eq!(q.peek(), Some(&b));
        let mut q = PriorityQueue::new(ReplicaId(2));
        on_vcbc_output(&mut q, 3, &b, &BTreeSet::new());
        assert!(q.peek().is_none());
    }
}
