//! Value factorization learners: recurrent parameter-shared agent networks,
//! monotonic hypernetwork mixing, episode replay, ε-greedy exploration and
//! Peng's Q(λ) targets.

mod learner;
pub mod nets;
mod replay;
mod schedule;
mod targets;
mod train;

use serde::{Deserialize, Serialize};

pub use learner::{Actor, Learner, OptimizerKind, StepStats};
pub use nets::{Dims, MixerKind, NetShape};
pub use replay::ReplayBuffer;
pub use schedule::{select_actions, EpsilonSchedule};
pub use targets::peng_targets;
pub use train::{dims_for, train, GreedyPolicy};

use crate::error::{Error, Result};
use crate::numcore::{AdamConfig, InitScheme, RmsPropConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QmixConfig {
    pub mixer: MixerKind,
    /// Environment steps to train for.
    pub total_steps: u64,
    pub gamma: f64,
    /// Trace parameter of the Q(λ) targets; 0 gives one-step targets.
    pub lambda: f64,
    /// Episodes per gradient step.
    pub batch_size: usize,
    /// Episodes unrolled per tape; gradients are accumulated across chunks.
    pub batch_chunk: usize,
    /// Replay capacity in episodes.
    pub buffer_capacity: usize,
    /// Gradient steps between target-network refreshes.
    pub target_update: u64,
    pub optimizer: OptimizerKind,
    pub adam: AdamConfig,
    pub rmsprop: RmsPropConfig,
    /// Learning-rate factor applied every `decay_every` gradient steps
    /// (1 disables the decay).
    pub lr_decay: f64,
    pub decay_every: u64,
    /// Global gradient-norm bound (0 disables clipping).
    pub grad_clip: f64,
    pub init: InitScheme,
    pub epsilon: EpsilonSchedule,
    pub net: NetShape,
    /// Training episodes between greedy evaluations.
    pub eval_every: usize,
    /// Episodes per greedy evaluation.
    pub eval_episodes: usize,
}

impl Default for QmixConfig {
    fn default() -> Self {
        QmixConfig {
            mixer: MixerKind::Qmix,
            total_steps: 1_500_000,
            gamma: 0.99,
            lambda: 0.4,
            batch_size: 64,
            batch_chunk: 32,
            buffer_capacity: 5000,
            target_update: 100,
            optimizer: OptimizerKind::Adam,
            adam: AdamConfig::default(),
            rmsprop: RmsPropConfig::default(),
            lr_decay: 0.991,
            decay_every: 100,
            grad_clip: 10.0,
            init: InitScheme::XavierOrthogonal,
            epsilon: EpsilonSchedule::default(),
            net: NetShape::default(),
            eval_every: 20,
            eval_episodes: 5,
        }
    }
}

impl QmixConfig {
    /// Plain QMIX: one-step targets, RMSProp at a constant rate and uniform
    /// fan-in initialization. Reward clipping is switched off separately in
    /// the environment config.
    pub fn original() -> Self {
        Self::default().to_original()
    }

    /// This config with the plain-QMIX switches applied; budgets, widths and
    /// evaluation settings are kept.
    pub fn to_original(&self) -> Self {
        QmixConfig {
            lambda: 0.0,
            optimizer: OptimizerKind::RmsProp,
            lr_decay: 1.0,
            init: InitScheme::Uniform,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return err("gamma must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return err("lambda must lie in [0, 1]");
        }
        if self.batch_size == 0 || self.batch_chunk == 0 || self.buffer_capacity == 0 {
            return err("batch size, chunk and buffer capacity must be positive");
        }
        if self.target_update == 0 || self.decay_every == 0 {
            return err("update cadences must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return err("lr_decay must lie in (0, 1]");
        }
        if self.grad_clip < 0.0 || self.grad_clip.is_nan() {
            return err("grad_clip must be non-negative");
        }
        let e = &self.epsilon;
        if !(0.0..=1.0).contains(&e.start) || !(0.0..=1.0).contains(&e.end) || e.end > e.start {
            return err("epsilon must anneal downwards within [0, 1]");
        }
        if self.net.hidden == 0 || self.net.embed == 0 {
            return err("network widths must be positive");
        }
        if self.eval_every == 0 || self.eval_episodes == 0 {
            return err("evaluation cadence and size must be positive");
        }
        Ok(())
    }
}
