//! Fixed-capacity experience replay and Bellman target assembly.
//!
//! Transitions are stored FIFO in a ring buffer and sampled uniformly
//! without replacement within a batch. Terminal transitions bootstrap to the
//! bare reward — their successor state is never inspected.

use rand::Rng;

use crate::environment::{Action, AgentState};
use crate::error::{Error, Result};
use crate::qlearn::QNetwork;

/// One stored transition.
#[derive(Debug, Clone)]
pub struct Experience {
    pub state: AgentState,
    pub action: Action,
    pub reward: f64,
    pub next_state: AgentState,
    /// True when the action triggered or the episode hit its step limit.
    pub terminal: bool,
}

/// Ring buffer of experiences; the oldest entry is overwritten first.
#[derive(Debug, Clone)]
pub struct ReplayMemory {
    buf: Vec<Experience>,
    capacity: usize,
    cursor: usize,
}

impl ReplayMemory {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayMemory { buf: Vec::with_capacity(capacity), capacity, cursor: 0 }
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, exp: Experience) {
        if self.buf.len() < self.capacity {
            self.buf.push(exp);
        } else {
            self.buf[self.cursor] = exp;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    pub fn get(&self, index: usize) -> Option<&Experience> {
        self.buf.get(index)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Experience> {
        self.buf.iter()
    }

    /// Uniform sample without replacement within the batch.
    pub fn sample<R: Rng>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<&Experience>> {
        if self.buf.len() < batch_size {
            return Err(Error::InsufficientExperiences {
                have: self.buf.len(),
                need: batch_size,
            });
        }
        let idx = rand::seq::index::sample(rng, self.buf.len(), batch_size);
        Ok(idx.into_iter().map(|i| &self.buf[i]).collect())
    }
}

/// Per-sample training target: reward for terminal transitions, otherwise
/// reward + gamma * max over the successor state's Q-values.
pub fn bellman_targets(
    batch: &[&Experience],
    net: &QNetwork,
    gamma: f64,
) -> Result<Vec<(f64, Action)>> {
    let mut targets = Vec::with_capacity(batch.len());
    for exp in batch {
        let target = if exp.terminal {
            exp.reward
        } else {
            let q = net.forward_infer(&exp.next_state.to_input())?;
            let best = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            exp.reward + gamma * best
        };
        targets.push((target, exp.action));
    }
    Ok(targets)
}
