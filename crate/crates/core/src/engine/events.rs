//! Deterministic event queue ordered by (time, insertion sequence).

use std::collections::BTreeMap;

use crate::model::Millis;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    /// A request reaches its current server (origin or offload hop).
    RequestArrival { req: usize },
    /// Next frame of a stream is produced at its source.
    FrameRelease { req: usize, frame: u32 },
    /// A request or frame reaches the worker it was routed to.
    Enqueue { worker: usize, req: usize, frame: Option<u32>, deadline: Millis },
    BatchTimeout { worker: usize },
    BatchComplete { worker: usize },
    SyncRound,
    PlacementEpoch { epoch: u64 },
    DeviceRegister { device: usize },
    Fault { index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub time: Millis,
    pub seq: u64,
    pub kind: EventKind,
}

#[derive(Debug, Default)]
pub struct EventQueue {
    events: BTreeMap<(Millis, u64), EventKind>,
    next_seq: u64,
    now: Millis,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    /// Schedules `kind` at `time`; times in the past are clamped to now so the
    /// clock never runs backwards.
    pub fn push(&mut self, time: Millis, kind: EventKind) {
        let t = time.max(self.now);
        self.events.insert((t, self.next_seq), kind);
        self.next_seq += 1;
    }

    pub fn pop(&mut self) -> Option<Event> {
        let ((time, seq), kind) = self.events.pop_first()?;
        debug_assert!(time >= self.now);
        self.now = time;
        Some(Event { time, seq, kind })
    }

    pub fn now(&self) -> Millis {
        self.now
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_break_by_insertion() {
        let mut q = EventQueue::new();
        q.push(5, EventKind::SyncRound);
        q.push(5, EventKind::BatchTimeout { worker: 1 });
        q.push(3, EventKind::BatchTimeout { worker: 2 });
        let order: Vec<_> = std::iter::from_fn(|| q.pop()).map(|e| (e.time, e.kind)).collect();
        assert_eq!(
            order,
            vec![
                (3, EventKind::BatchTimeout { worker: 2 }),
                (5, EventKind::SyncRound),
                (5, EventKind::BatchTimeout { worker: 1 }),
            ]
        );
    }

    #[test]
    fn clock_never_decreases() {
        let mut q = EventQueue::new();
        q.push(10, EventKind::SyncRound);
        q.pop();
        q.push(4, EventKind::SyncRound);
        assert_eq!(q.pop().unwrap().time, 10);
    }
}
