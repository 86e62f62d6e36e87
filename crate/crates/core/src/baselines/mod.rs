//! Comparison learners: independent Q-learning and VDN (the value
//! factorization trainer with a different mixer) and a parameter-shared PPO.

mod ppo;

use serde::{Deserialize, Serialize};

pub use ppo::{
    masked_probs, ppo_update, train_ppo, PolicyValueNet, PpoBatch, PpoConfig, PpoPolicy,
    UpdateStats,
};

use crate::env::{EnvConfig, Episode};
use crate::error::{Error, Result};
use crate::qmix::{self, Learner, MixerKind, QmixConfig};
use crate::sim::ScenarioConfig;
use crate::training::{TrainOptions, TrainOutcome};

/// Value decomposition: `Q_tot` is the sum of the per-agent values.
pub fn vdn_mix(q_taken: &[f64]) -> f64 {
    q_taken.iter().sum()
}

/// Summed per-agent one-step TD loss of an independent learner on `episodes`.
pub fn iql_loss(learner: &Learner, episodes: &[&Episode]) -> Result<f64> {
    if learner.config.mixer != MixerKind::Independent {
        return Err(Error::contract("iql_loss needs an independent learner"));
    }
    learner.loss_with(&learner.params, episodes)
}

/// Generalized advantage estimates for one trajectory segment.
///
/// `values` holds one entry per reward plus the bootstrap value of the
/// state after the last reward (0 when that state is terminal).
pub fn gae_advantages(
    rewards: &[f64],
    values: &[f64],
    gamma: f64,
    lambda: f64,
) -> Result<Vec<f64>> {
    if values.len() != rewards.len() + 1 {
        return Err(Error::contract(format!(
            "gae: {} rewards need {} values, got {}",
            rewards.len(),
            rewards.len() + 1,
            values.len()
        )));
    }
    let mut adv = vec![0.0; rewards.len()];
    let mut next = 0.0;
    for t in (0..rewards.len()).rev() {
        let delta = rewards[t] + gamma * values[t + 1] - values[t];
        next = delta + gamma * lambda * next;
        adv[t] = next;
    }
    Ok(adv)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    Iql,
    Vdn,
    Ppo,
}

/// Trains one of the comparison learners. IQL and VDN reuse `qmix` with
/// its mixer switched; everything else in `qmix` is kept.
pub fn train_baseline(
    which: Baseline,
    scenario: &ScenarioConfig,
    env_config: &EnvConfig,
    qmix: &QmixConfig,
    ppo: &PpoConfig,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    let with_mixer = |mixer| QmixConfig {
        mixer,
        ..qmix.clone()
    };
    match which {
        Baseline::Iql => qmix::train(
            scenario,
            env_config,
            &with_mixer(MixerKind::Independent),
            options,
        ),
        Baseline::Vdn => qmix::train(scenario, env_config, &with_mixer(MixerKind::Vdn), options),
        Baseline::Ppo => train_ppo(scenario, env_config, ppo, options),
    }
}
