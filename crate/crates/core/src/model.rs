//! Types shared by the learned and ablation policies.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assign::AssignError;
use crate::env::EnvError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Assign(#[from] AssignError),
    #[error("every goal is masked")]
    AllMasked,
    #[error("agent {0} has no assigned goal")]
    UnsetGoal(usize),
    #[error("batch mixes observation shapes")]
    RaggedBatch,
    #[error("empty batch")]
    EmptyBatch,
    #[error("model built for {expected} agents, world has {got}")]
    TeamSize { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecisionMode {
    /// Draw from the distribution (training).
    #[default]
    Sample,
    /// Highest probability, lowest index on ties (evaluation).
    Greedy,
}

/// Additive logit offset that removes a choice from a softmax.
pub const MASKED_LOGIT: f64 = -1e9;

/// Index of the largest entry; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw from `probs` (assumed to sum to one).
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left `acc` a hair under one.
    last_positive
}

pub fn choose<R: Rng + ?Sized>(probs: &[f64], mode: DecisionMode, rng: &mut R) -> usize {
    match mode {
        DecisionMode::Greedy => argmax(probs),
        DecisionMode::Sample => sample_index(probs, rng),
    }
}
