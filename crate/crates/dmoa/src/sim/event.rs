//! The simulation event heap: a min-heap over (time, sequence number).
//!
//! Sequence numbers are assigned at scheduling time, so simultaneous events
//! fire in the order they were scheduled — a total, platform-independent
//! order with no reliance on hash or heap-internal layout.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::protocol::{InferenceTask, ResponseMsg, TaskId};

#[derive(Debug, Clone)]
pub enum EventKind {
    /// Next autonomous prompt arrival at a node's user.
    Arrival { node: usize },
    /// A prompt injected at a fixed time (isolated-job experiments).
    InjectedArrival { node: usize, text: String },
    /// A dispatched task reaches its node's queue after network delay.
    Delivery { node: usize, task: InferenceTask },
    /// The node's single LLM finishes the task it was serving.
    ServiceComplete { node: usize, task_id: TaskId },
    /// A finished response reaches the job's origin after network delay.
    ResponseDelivery { node: usize, response: ResponseMsg },
}

#[derive(Debug, Clone)]
pub struct Event {
    pub time: f64,
    pub seq: u64,
    pub kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.time.total_cmp(&other.time) == Ordering::Equal && self.seq == other.seq
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        // reversed: BinaryHeap is a max-heap, we want earliest (time, seq) first
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Min-heap of events in strict (time, seq) order.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Event>,
    next_seq: u64,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn schedule(&mut self, time: f64, kind: EventKind) {
        debug_assert!(time.is_finite() && time >= 0.0, "bad event time {time}");
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Event { time, seq, kind });
    }

    pub fn pop(&mut self) -> Option<Event> {
        self.heap.pop()
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}
