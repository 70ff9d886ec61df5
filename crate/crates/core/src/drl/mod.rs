//! Reinforcement-learning coalition formation: a factored DQN over the
//! joint coalition choice and a Qmix learner with decentralized execution.

mod cffl;
mod dqn;
mod qmix;

use std::collections::VecDeque;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use cffl::{history_hash, run_cffl, write_history_csv, Backend, CfflConfig, EpochRecord};
pub use dqn::{dqn_q_values, dqn_select, dqn_train_step, DqnAgent};
pub use qmix::{
    qmix_agent_q, qmix_gradients, AgentObservation, MixCache, MixingNetwork, QmixConfig,
    QmixLearner,
};

use crate::coalition::Partition;
use crate::seed::Rng;
use crate::{Error, Result};

/// `R = 1 − ē`.
pub fn reward(mean_error: f64) -> f64 {
    1.0 - mean_error
}

/// Mean of per-user linear NMSE values, each clipped to `[0, 1]`.
pub fn mean_clipped_error(errors: &[f64]) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if errors.iter().any(|e| e.is_nan()) {
        return Err(Error::InvalidArgument("NaN error".into()));
    }
    Ok(errors.iter().map(|e| e.clamp(0.0, 1.0)).sum::<f64>() / errors.len() as f64)
}

/// Coalition choices `C` and sizes `D`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RlState {
    pub choices: Vec<usize>,
    pub sizes: Vec<usize>,
}

impl RlState {
    pub fn from_partition(p: &Partition) -> Self {
        Self {
            choices: p.assignment().to_vec(),
            sizes: p.sizes(),
        }
    }

    pub fn partition(&self) -> Result<Partition> {
        Partition::new(self.choices.clone(), self.sizes.len())
    }

    pub fn users(&self) -> usize {
        self.choices.len()
    }

    pub fn max_coalitions(&self) -> usize {
        self.sizes.len()
    }

    pub fn encoded_len(users: usize, max_coalitions: usize) -> usize {
        users * (max_coalitions + 1) + max_coalitions
    }

    /// One-hot choice per user followed by sizes divided by `K`.
    pub fn encode(&self) -> Vec<f64> {
        let j1 = self.max_coalitions() + 1;
        let k = self.users();
        let mut v = vec![0.0; Self::encoded_len(k, self.max_coalitions())];
        for (u, &c) in self.choices.iter().enumerate() {
            v[u * j1 + c] = 1.0;
        }
        for (j, &d) in self.sizes.iter().enumerate() {
            v[k * j1 + j] = d as f64 / k as f64;
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: RlState,
    pub action: Vec<usize>,
    pub reward: f64,
    pub next_state: RlState,
    pub done: bool,
}

/// Bounded FIFO of transitions with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if !t.reward.is_finite() {
            return Err(Error::InvalidArgument(
                "transition reward must be finite".into(),
            ));
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// `batch` draws with replacement.
    pub fn sample(&self, batch: usize, rng: &mut Rng) -> Result<Vec<&Transition>> {
        if self.items.len() < batch || batch == 0 {
            return Err(Error::InsufficientBuffer {
                have: self.items.len(),
                need: batch.max(1),
            });
        }
        Ok((0..batch)
            .map(|_| &self.items[rng.random_range(0..self.items.len())])
            .collect())
    }
}

/// Linear decay from `start` to `end` over the first `fraction` of
/// `total` epochs, then constant.
pub fn epsilon(epoch: usize, total: usize, start: f64, end: f64, fraction: f64) -> f64 {
    let horizon = (total as f64 * fraction).max(1.0);
    let t = (epoch as f64 / horizon).min(1.0);
    start + (end - start) * t
}

/// Index of the largest value, lowest index on ties.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
