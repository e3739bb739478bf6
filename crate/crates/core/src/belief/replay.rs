//! Replay storage for belief training: full games with per-timestep hidden
//! hands, so one stored game yields training examples at every prefix
//! length. Multiple producer threads push; a single trainer samples
//! snapshot-consistent batches.

use crate::env::{HiddenFeatures, Trajectory};
use rand::Rng;
use std::sync::{Arc, Mutex};

/// One agent's view of one finished game.
#[derive(Debug, Clone)]
pub struct ReplayRecord {
    pub agent: usize,
    pub trajectory: Trajectory,
    /// Hidden hand after t turns; index-aligned with `trajectory.steps`.
    pub hidden: Vec<HiddenFeatures>,
    pub policy_id: usize,
}

impl ReplayRecord {
    /// A uniformly drawn prefix-length training example: the AOH after `t`
    /// turns plus the hand held at that point.
    pub fn sample_example<R: Rng>(&self, rng: &mut R) -> (Trajectory, &HiddenFeatures) {
        let t = rng.gen_range(0..self.trajectory.steps.len());
        (self.trajectory.prefix(t), &self.hidden[t])
    }
}

struct Ring {
    records: Vec<Arc<ReplayRecord>>,
    next: usize,
    inserted: u64,
}

/// Bounded ring buffer. Insertions are atomic (whole records under one
/// lock); sampling takes one lock, so a batch never observes a half-written
/// record or a mid-batch eviction.
pub struct ReplayBuffer {
    capacity: usize,
    inner: Mutex<Ring>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay buffer needs positive capacity");
        ReplayBuffer {
            capacity,
            inner: Mutex::new(Ring {
                records: Vec::new(),
                next: 0,
                inserted: 0,
            }),
        }
    }

    pub fn push(&self, record: ReplayRecord) {
        let mut ring = self.inner.lock().unwrap();
        let record = Arc::new(record);
        if ring.records.len() < self.capacity {
            ring.records.push(record);
        } else {
            let next = ring.next;
            ring.records[next] = record;
            ring.next = (next + 1) % self.capacity;
        }
        ring.inserted += 1;
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Total records ever pushed (not capped by capacity).
    pub fn total_inserted(&self) -> u64 {
        self.inner.lock().unwrap().inserted
    }

    /// Uniform-with-replacement sample of `n` records from one consistent
    /// snapshot. Returns None while the buffer is empty.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Option<Vec<Arc<ReplayRecord>>> {
        let ring = self.inner.lock().unwrap();
        if ring.records.is_empty() {
            return None;
        }
        Some(
            (0..n)
                .map(|_| ring.records[rng.gen_range(0..ring.records.len())].clone())
                .collect(),
        )
    }
}
