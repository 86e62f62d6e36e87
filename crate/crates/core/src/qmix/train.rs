use rand::RngCore;
use rand_chacha::ChaCha8Rng;

use super::learner::{Actor, Learner};
use super::nets::{masked_argmax, Dims};
use super::schedule::{select_actions, EpsilonSchedule};
use super::{QmixConfig, ReplayBuffer};
use crate::env::{
    rollout, EnvConfig, IntersectionEnv, Observations, Policy, Record, N_ACTIONS, OBS_DIM,
};
use crate::error::{Error, Result};
use crate::metrics::TrainRecord;
use crate::numcore::ParamStore;
use crate::sim::ScenarioConfig;
use crate::training::{eval_seeds, evaluate, stream, Tracker, TrainOptions, TrainOutcome};

/// Greedy (ε = 0) policy over a trained agent network.
pub struct GreedyPolicy<'p> {
    actor: Actor<'p>,
}

impl<'p> GreedyPolicy<'p> {
    pub fn new(params: &'p ParamStore, dims: Dims) -> Self {
        GreedyPolicy {
            actor: Actor::new(params, dims),
        }
    }
}

impl Policy for GreedyPolicy<'_> {
    fn reset(&mut self) {
        self.actor.reset();
    }

    fn act(&mut self, obs: &Observations) -> Result<Vec<usize>> {
        let q = self.actor.q_values(&obs.obs)?;
        obs.masks
            .iter()
            .enumerate()
            .map(|(a, m)| {
                masked_argmax(q.row(a), m)
                    .ok_or_else(|| Error::contract(format!("agent {a} has no legal action")))
            })
            .collect()
    }
}

/// ε-greedy behaviour policy; ε follows the global environment step count.
struct Explorer<'a, 'p> {
    actor: Actor<'p>,
    schedule: EpsilonSchedule,
    env_steps: &'a mut u64,
    rng: &'a mut ChaCha8Rng,
}

impl Policy for Explorer<'_, '_> {
    fn reset(&mut self) {
        self.actor.reset();
    }

    fn act(&mut self, obs: &Observations) -> Result<Vec<usize>> {
        let eps = self.schedule.value(*self.env_steps);
        let q = self.actor.q_values(&obs.obs)?;
        let a = select_actions(&q, &obs.masks, eps, self.rng)?;
        *self.env_steps += 1;
        Ok(a)
    }
}

pub fn dims_for(scenario: &ScenarioConfig, config: &QmixConfig) -> Dims {
    Dims {
        n_agents: scenario.agents(),
        obs_dim: OBS_DIM,
        n_actions: N_ACTIONS,
        shape: config.net,
    }
}

/// Trains a value-factorization learner (QMIX, VDN or IQL per
/// `config.mixer`).
///
/// One episode is collected per iteration, followed by one gradient step
/// once the buffer holds a full batch. Every `eval_every` episodes and
/// after the last one the greedy policy is evaluated on a fixed set of
/// seeds; the best-reward and best-safety snapshots are kept.
pub fn train(
    scenario: &ScenarioConfig,
    env_config: &EnvConfig,
    config: &QmixConfig,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    let dims = dims_for(scenario, config);
    let mut env = IntersectionEnv::new(scenario.clone(), env_config.clone())?;
    let mut eval_env = IntersectionEnv::new(scenario.clone(), env_config.clone())?;
    let mut learner = Learner::init(dims, config.clone(), &mut stream(options.seed, 1))?;
    let mut act_rng = stream(options.seed, 2);
    let mut sample_rng = stream(options.seed, 3);
    let mut episode_rng = stream(options.seed, 4);
    let eval_seeds = eval_seeds(options.seed, config.eval_episodes);
    let mut buffer = ReplayBuffer::new(config.buffer_capacity)?;
    let mut tracker = Tracker::new(options.out_dir.as_deref())?;

    let mut env_steps = 0u64;
    let mut episode = 0usize;
    while env_steps < config.total_steps {
        let seed = episode_rng.next_u64();
        let result = {
            let mut policy = Explorer {
                actor: learner.actor(),
                schedule: config.epsilon,
                env_steps: &mut env_steps,
                rng: &mut act_rng,
            };
            rollout(
                &mut env,
                &mut policy,
                seed,
                episode,
                Record {
                    episode: true,
                    trajectory: false,
                },
            )?
        };
        let epsilon = config.epsilon.value(env_steps);
        buffer.push(result.episode.expect("episode recorded"))?;
        let loss = if buffer.can_sample(config.batch_size) {
            let batch = buffer.sample(config.batch_size, &mut sample_rng)?;
            Some(learner.train_step(&batch)?.loss)
        } else {
            None
        };
        tracker.record(TrainRecord {
            episode,
            env_steps,
            reward: result.reward,
            collisions: result.metrics.collisions,
            epsilon,
            lr: learner.optimizer.lr(),
            loss,
        })?;
        episode += 1;
        if episode.is_multiple_of(config.eval_every) || env_steps >= config.total_steps {
            let mut greedy = GreedyPolicy::new(&learner.params, dims);
            let point = evaluate(&mut eval_env, &mut greedy, &eval_seeds, episode, env_steps)?;
            tracker.evaluated(point, &learner.params)?;
        }
    }
    tracker.finish(learner.params)
}
