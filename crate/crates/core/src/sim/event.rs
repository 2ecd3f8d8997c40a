use std::cmp::Ordering;
use std::collections::BinaryHeap;

struct Item<E> {
    at: f64,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Item<E> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<E> Eq for Item<E> {}

impl<E> PartialOrd for Item<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Item<E> {
    // reversed so the max-heap pops the earliest (time, seq)
    fn cmp(&self, other: &Self) -> Ordering {
        other.at.total_cmp(&self.at).then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Min-queue of events keyed by (virtual ns, insertion sequence).
pub struct EventQueue<E> {
    heap: BinaryHeap<Item<E>>,
    seq: u64,
    now: f64,
    dispatched: u64,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            seq: 0,
            now: 0.0,
            dispatched: 0,
        }
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    /// Schedules `event` at `at`; times in the past are clamped to now.
    pub fn push(&mut self, at: f64, event: E) {
        debug_assert!(at.is_finite(), "event time must be finite");
        let at = at.max(self.now);
        self.heap.push(Item {
            at,
            seq: self.seq,
            event,
        });
        self.seq += 1;
    }

    pub fn peek_time(&self) -> Option<f64> {
        self.heap.peek().map(|i| i.at)
    }

    pub fn pop(&mut self) -> Option<(f64, E)> {
        let item = self.heap.pop()?;
        debug_assert!(item.at >= self.now);
        self.now = item.at;
        self.dispatched += 1;
        Some((item.at, item.event))
    }

    /// Moves the clock forward without dispatching anything.
    pub fn advance_to(&mut self, t: f64) {
        if t > self.now {
            self.now = t;
        }
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn dispatched(&self) -> u64 {
        self.dispatched
    }
}
