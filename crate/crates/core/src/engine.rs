// SPDX-License-Identifier: Apache-2.0

//! Virtual clock and totally ordered event queue.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use thiserror::Error;

use crate::cluster::JobId;

/// Simulation time in minutes.
pub type Minutes = f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    JobArrival(JobId),
    /// Run one scheduling pass after every other event at this instant.
    SchedAttempt,
    AcquisitionTimeout { job: JobId, attempt: u32 },
    BackoffExpired { job: JobId, attempt: u32 },
    /// End of a run segment: passed or killed, decided when it started.
    JobFinish { job: JobId, run: u32 },
    FailureFired { job: JobId, run: u32 },
    /// A pre-run screen finished or caught a fault.
    ScreenDone(JobId),
    PreemptCheck,
    UtilizationSample,
    MigrationCheck,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimEvent {
    pub time: Minutes,
    pub seq: u64,
    pub kind: EventKind,
}

// BinaryHeap is a max-heap; invert so the smallest (time, seq) pops first.
impl Ord for SimEvent {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for SimEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Eq for SimEvent {}

#[derive(Debug, Error, PartialEq)]
pub enum EngineError {
    #[error("event at t={at} scheduled in the past (now={now})")]
    PastEvent { at: Minutes, now: Minutes },
    #[error("event at non-finite time {0}")]
    NonFinite(Minutes),
    #[error("livelock guard tripped after {0} events")]
    LivelockGuard(u64),
}

#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<SimEvent>,
    now: Minutes,
    next_seq: u64,
    dispatched: u64,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> Minutes {
        self.now
    }

    pub fn dispatched(&self) -> u64 {
        self.dispatched
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn schedule(&mut self, time: Minutes, kind: EventKind) -> Result<u64, EngineError> {
        if !time.is_finite() {
            return Err(EngineError::NonFinite(time));
        }
        if time < self.now {
            return Err(EngineError::PastEvent { at: time, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(SimEvent { time, seq, kind });
        Ok(seq)
    }

    /// Pops the globally minimal `(time, seq)` and advances the clock to it.
    pub fn pop(&mut self) -> Option<SimEvent> {
        let ev = self.heap.pop()?;
        self.now = ev.time;
        self.dispatched += 1;
        Some(ev)
    }

    pub fn peek_time(&self) -> Option<Minutes> {
        self.heap.peek().map(|e| e.time)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn earlier_time_pops_first() {
        let mut q = EventQueue::new();
        q.schedule(5.0, EventKind::PreemptCheck).unwrap();
        q.schedule(3.0, EventKind::MigrationCheck).unwrap();
        let first = q.pop().unwrap();
        assert_eq!(first.time, 3.0);
        assert_eq!(q.now(), 3.0);
        assert_eq!(q.pop().unwrap().time, 5.0);
        assert!(q.pop().is_none());
    }

    #[test]
    fn same_time_pops_in_insertion_order() {
        let mut q = EventQueue::new();
        q.schedule(7.0, EventKind::JobArrival(JobId(1))).unwrap();
        q.schedule(7.0, EventKind::JobArrival(JobId(0))).unwrap();
        assert_eq!(q.pop().unwrap().kind, EventKind::JobArrival(JobId(1)));
        assert_eq!(q.pop().unwrap().kind, EventKind::JobArrival(JobId(0)));
    }

    #[test]
    fn past_event_rejected() {
        let mut q = EventQueue::new();
        q.schedule(4.0, EventKind::SchedAttempt).unwrap();
        q.pop();
        assert_eq!(
            q.schedule(3.0, EventKind::SchedAttempt),
            Err(EngineError::PastEvent { at: 3.0, now: 4.0 })
        );
        assert!(q.schedule(f64::NAN, EventKind::SchedAttempt).is_err());
    }

    proptest! {
        #[test]
        fn pops_sorted_by_time_then_seq(times in proptest::collection::vec(0u32..20, 1..60)) {
            let mut q = EventQueue::new();
            for t in &times {
                q.schedule(*t as f64 * 0.5, EventKind::SchedAttempt).unwrap();
            }
            let mut last = (f64::NEG_INFINITY, 0u64);
            while let Some(ev) = q.pop() {
                prop_assert!(ev.time > last.0 || (ev.time == last.0 && ev.seq > last.1));
                last = (ev.time, ev.seq);
            }
        }
    }
}
