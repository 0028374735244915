//! Fixed-capacity experience replay.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::SimRng;

/// One stored step. `phi` and `phi_next` are dense feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub phi: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub phi_next: Vec<f64>,
    pub terminal: bool,
}

/// Ring buffer; once full, each push overwrites the oldest entry.
#[derive(Debug, Clone, Default)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
    pushed: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self { capacity, items: Vec::with_capacity(capacity.min(1 << 16)), next: 0, pushed: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn total_pushed(&self) -> u64 {
        self.pushed
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
        self.pushed += 1;
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Uniform sample with replacement.
    pub fn sample<'a>(&'a self, n: usize, rng: &mut SimRng) -> Vec<&'a Transition> {
        assert!(!self.items.is_empty(), "sampling from an empty replay buffer");
        (0..n).map(|_| &self.items[rng.gen_range(0..self.items.len())]).collect()
    }
}
