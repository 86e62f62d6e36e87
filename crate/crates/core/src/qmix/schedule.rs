use rand::Rng;
use serde::{Deserialize, Serialize};

use super::nets::masked_argmax;
use crate::env::ActionMask;
use crate::error::{Error, Result};
use crate::numcore::Matrix;

/// Linear ε annealing over environment steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub anneal_steps: u64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        EpsilonSchedule {
            start: 1.0,
            end: 0.05,
            anneal_steps: 100_000,
        }
    }
}

impl EpsilonSchedule {
    pub fn value(&self, env_steps: u64) -> f64 {
        if self.anneal_steps == 0 || env_steps >= self.anneal_steps {
            return self.end;
        }
        let frac = env_steps as f64 / self.anneal_steps as f64;
        self.start + (self.end - self.start) * frac
    }
}

/// ε-greedy over legal actions, one independent draw per agent.
///
/// Each agent consumes exactly one uniform draw, plus one more when it
/// explores, so the random stream does not depend on the q values.
pub fn select_actions<R: Rng + ?Sized>(
    q: &Matrix,
    masks: &[ActionMask],
    epsilon: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if q.rows() != masks.len() {
        return Err(Error::shape(format!(
            "{} q rows for {} masks",
            q.rows(),
            masks.len()
        )));
    }
    let mut out = Vec::with_capacity(masks.len());
    for (agent, mask) in masks.iter().enumerate() {
        let legal: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        if legal.is_empty() {
            return Err(Error::contract(format!(
                "agent {agent} has no legal action"
            )));
        }
        let a = if rng.random::<f64>() < epsilon {
            legal[rng.random_range(0..legal.len())]
        } else {
            masked_argmax(q.row(agent), mask).expect("legal action exists")
        };
        out.push(a);
    }
    Ok(out)
}
