//! The comparison policies: Greedy, TDMA, and Random are static strategies;
//! IQL is the independent-learner variant of the trainer and lives in
//! [`crate::agent`].

use crate::env::{Action, SlotPolicy, ACTION_COUNT};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The four comparison algorithms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    Greedy,
    Tdma,
    Random,
    Iql,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Greedy => "greedy",
            BaselineKind::Tdma => "tdma",
            BaselineKind::Random => "random",
            BaselineKind::Iql => "iql",
        }
    }
}

/// Every node transmits at the maximum available power in every slot.
#[derive(Debug, Clone, Copy)]
pub struct Greedy;

impl SlotPolicy for Greedy {
    fn act(&mut self, _node: usize, _slot: usize, _obs: &[f64]) -> Action {
        Action::new(ACTION_COUNT - 1)
    }
}

/// Node `i` transmits at maximum power when `slot mod n == i`, otherwise
/// stays silent.
#[derive(Debug, Clone, Copy)]
pub struct Tdma {
    pub n: usize,
}

impl SlotPolicy for Tdma {
    fn act(&mut self, node: usize, slot: usize, _obs: &[f64]) -> Action {
        if slot % self.n == node {
            Action::new(ACTION_COUNT - 1)
        } else {
            Action::SILENT
        }
    }
}

/// Uniform over all power indices; index 0 means the node refrains from
/// transmitting, so the silence probability is `1 / 7`.
#[derive(Debug, Clone)]
pub struct RandomPolicy {
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        RandomPolicy {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl SlotPolicy for RandomPolicy {
    fn act(&mut self, _node: usize, _slot: usize, _obs: &[f64]) -> Action {
        Action::new(self.rng.gen_range(0..ACTION_COUNT))
    }
}
