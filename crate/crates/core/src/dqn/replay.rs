use rand::Rng;

use crate::control::OBS_DIM;
use crate::error::{Error, Result};

/// One interaction step `(s_t, a_t, r_t, s_{t+1})`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub state: [f64; OBS_DIM],
    pub action: usize,
    pub reward: f64,
    pub next_state: [f64; OBS_DIM],
    pub terminal: bool,
}

/// Fixed-capacity FIFO ring buffer of transitions.
#[derive(Debug, Clone)]
pub struct ReplayMemory {
    capacity: usize,
    items: Vec<Transition>,
    head: usize,
}

impl ReplayMemory {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            head: 0,
        }
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

    /// Append, overwriting the oldest entry once full.
    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.head] = t;
            self.head = (self.head + 1) % self.capacity;
        }
    }

    /// Contents from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        let (newer, older) = self.items.split_at(self.head);
        older.iter().chain(newer.iter())
    }

    /// Uniform sampling with replacement; returns slot indices.
    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.items.is_empty() {
            return Err(Error::EmptyMemory);
        }
        let len = self.items.len();
        Ok((0..n).map(|_| rng.random_range(0..len)).collect())
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Transition>> {
        Ok(self
            .sample_indices(n, rng)?
            .into_iter()
            .map(|i| self.items[i])
            .collect())
    }
}
