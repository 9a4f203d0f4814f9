//! Virtual time and the pending-event queue.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

struct Scheduled<E> {
    at: f64,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Scheduled<E> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<E> Eq for Scheduled<E> {}

impl<E> PartialOrd for Scheduled<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Scheduled<E> {
    // Reversed so the max-heap pops the earliest (time, seq) first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .at
            .total_cmp(&self.at)
            .then(other.seq.cmp(&self.seq))
    }
}

/// Events ordered by (time, insertion sequence).
pub struct SimClock<E> {
    now: f64,
    seq: u64,
    heap: BinaryHeap<Scheduled<E>>,
}

impl<E> Default for SimClock<E> {
    fn default() -> Self {
        Self {
            now: 0.0,
            seq: 0,
            heap: BinaryHeap::new(),
        }
    }
}

impl<E> SimClock<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn pending(&self) -> usize {
        self.heap.len()
    }

    /// Schedules `event` at `at`; times in the past are clamped to now.
    pub fn schedule(&mut self, at: f64, event: E) {
        let at = if at.is_finite() && at > self.now { at } else { self.now };
        self.heap.push(Scheduled {
            at,
            seq: self.seq,
            event,
        });
        self.seq += 1;
    }

    pub fn schedule_in(&mut self, delay: f64, event: E) {
        self.schedule(self.now + delay.max(0.0), event);
    }

    /// Advances to the next event and returns it.
    pub fn pop(&mut self) -> Option<(f64, E)> {
        let s = self.heap.pop()?;
        debug_assert!(s.at >= self.now);
        self.now = s.at;
        Some((s.at, s.event))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pops_by_time_then_sequence() {
        let mut c = SimClock::new();
        c.schedule(2.0, "b");
        c.schedule(1.0, "a1");
        c.schedule(1.0, "a2");
        c.schedule(0.5, "z");
        let order: Vec<_> = std::iter::from_fn(|| c.pop().map(|(_, e)| e)).collect();
        assert_eq!(order, ["z", "a1", "a2", "b"]);
        assert_eq!(c.now(), 2.0);
    }

    #[test]
    fn past_times_clamp_to_now() {
        let mut c = SimClock::new();
        c.schedule(5.0, 1);
        c.pop();
        c.schedule(1.0, 2);
        assert_eq!(c.pop(), Some((5.0, 2)));
    }
}
