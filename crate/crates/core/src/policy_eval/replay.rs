use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::envs::EnvState;
use crate::error::{CoreError, Result};

/// One environment step, keeping the raw simulator state at `obs` so TD
/// targets can re-step the same (state, action) under every uncertainty-set
/// member.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub obs_next: Vec<f64>,
    pub env_state: EnvState,
}

impl Transition {
    pub fn is_finite(&self) -> bool {
        self.obs.iter().chain(&self.action).chain(&self.obs_next).all(|v| v.is_finite())
            && self.reward.is_finite()
            && self.env_state.is_finite()
    }
}

/// Fixed-capacity ring with FIFO eviction and uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    data: Vec<Transition>,
    capacity: usize,
    write: usize,
}

pub const DEFAULT_REPLAY_CAPACITY: usize = 1_000_000;

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(CoreError::Config("replay capacity must be positive".into()));
        }
        Ok(ReplayBuffer { data: Vec::new(), capacity, write: 0 })
    }

    pub fn push(&mut self, t: Transition) {
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[self.write] = t;
        }
        self.write = (self.write + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, index: usize) -> &Transition {
        &self.data[index]
    }

    /// Uniform with replacement.
    pub fn sample(&self, rng: &mut ChaCha8Rng, n: usize) -> Result<Vec<&Transition>> {
        if self.is_empty() {
            return Err(CoreError::Data("cannot sample from an empty replay buffer".into()));
        }
        Ok((0..n).map(|_| &self.data[rng.random_range(0..self.data.len())]).collect())
    }
}
