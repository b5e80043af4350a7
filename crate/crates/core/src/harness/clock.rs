use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::time::{Duration, Instant};

/// Tie-break order for events at the same instant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Priority {
    Grid = 0,
    Devices = 1,
    Delivery = 2,
    Meter = 3,
    Estimator = 4,
}

/// Simulation time in whole microseconds.
pub type Micros = i64;

pub fn to_micros(t: f64) -> Micros {
    (t * 1e6).round() as Micros
}

pub fn to_secs(t: Micros) -> f64 {
    t as f64 / 1e6
}

struct Entry<E> {
    at: Micros,
    priority: Priority,
    seq: u64,
    event: E,
}

impl<E> Entry<E> {
    fn key(&self) -> (Micros, Priority, u64) {
        (self.at, self.priority, self.seq)
    }
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}
impl<E> Eq for Entry<E> {}
impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<E> Ord for Entry<E> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key().cmp(&other.key())
    }
}

/// Totally ordered event queue: by time, then priority, then insertion.
pub struct Scheduler<E> {
    heap: BinaryHeap<Reverse<Entry<E>>>,
    seq: u64,
    now: Micros,
}

impl<E> Default for Scheduler<E> {
    fn default() -> Self {
        Self {
            heap: BinaryHeap::new(),
            seq: 0,
            now: 0,
        }
    }
}

impl<E> Scheduler<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> Micros {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Events in the past are moved up to the current time.
    pub fn schedule(&mut self, at: Micros, priority: Priority, event: E) {
        let seq = self.seq;
        self.seq += 1;
        self.heap.push(Reverse(Entry {
            at: at.max(self.now),
            priority,
            seq,
            event,
        }));
    }

    pub fn peek_time(&self) -> Option<Micros> {
        self.heap.peek().map(|e| e.0.at)
    }

    pub fn pop(&mut self) -> Option<(Micros, Priority, E)> {
        let Reverse(e) = self.heap.pop()?;
        self.now = e.at;
        Some((e.at, e.priority, e.event))
    }
}

/// Holds the caller back until wall time catches up with simulation time.
#[derive(Debug, Clone)]
pub struct Pacer {
    start: Instant,
    speedup: f64,
}

impl Pacer {
    pub fn new(speedup: f64) -> Self {
        Self {
            start: Instant::now(),
            speedup: speedup.max(1e-9),
        }
    }

    pub fn wait_until(&self, sim_s: f64) {
        let target = self.start + Duration::from_secs_f64(sim_s.max(0.0) / self.speedup);
        let now = Instant::now();
        if target > now {
            std::thread::sleep(target - now);
        }
    }

    pub fn elapsed(&self) -> Duration {
        self.start.elapsed()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_times_pop_in_priority_order() {
        for _ in 0..3 {
            let mut s = Scheduler::new();
            s.schedule(5, Priority::Estimator, "est");
            s.schedule(5, Priority::Delivery, "d1");
            s.schedule(5, Priority::Grid, "grid");
            s.schedule(5, Priority::Delivery, "d2");
            s.schedule(5, Priority::Devices, "dev");
            s.schedule(4, Priority::Meter, "early");
            let order: Vec<_> = std::iter::from_fn(|| s.pop().map(|e| e.2)).collect();
            assert_eq!(order, ["early", "grid", "dev", "d1", "d2", "est"]);
        }
    }

    #[test]
    fn past_events_run_now() {
        let mut s = Scheduler::new();
        s.schedule(10, Priority::Grid, 1);
        s.pop();
        s.schedule(3, Priority::Grid, 2);
        assert_eq!(s.pop().unwrap().0, 10);
    }

    #[test]
    fn micros_round_trip() {
        assert_eq!(to_micros(0.1), 100_000);
        assert_eq!(to_micros(3.0 * 0.1), 300_000);
        assert_eq!(to_secs(1_500_000), 1.5);
    }

    #[test]
    fn pacer_waits_for_wall_clock() {
        let p = Pacer::new(10.0);
        p.wait_until(0.5);
        let e = p.elapsed().as_secs_f64();
        assert!((0.05..0.2).contains(&e), "{e}");
    }
}
