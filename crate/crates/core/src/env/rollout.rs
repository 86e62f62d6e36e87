use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Episode, IntersectionEnv, Observations, HOLD};
use crate::error::{Error, Result};
use crate::metrics::{CollisionRow, MetricsAccumulator, MetricsRecord, StepSummary, TrajectoryRow};

/// Anything that maps joint observations to a joint action.
pub trait Policy {
    /// Called at the start of every episode.
    fn reset(&mut self) {}

    fn act(&mut self, obs: &Observations) -> Result<Vec<usize>>;
}

/// Uniform over the legal actions of each agent.
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

impl Policy for RandomPolicy {
    fn act(&mut self, obs: &Observations) -> Result<Vec<usize>> {
        obs.masks
            .iter()
            .map(|m| {
                let legal: Vec<usize> = (0..m.len()).filter(|&i| m[i]).collect();
                if legal.is_empty() {
                    return Err(Error::contract("mask without legal action"));
                }
                Ok(legal[self.rng.random_range(0..legal.len())])
            })
            .collect()
    }
}

/// Picks the first legal entry of a fixed preference list for every agent.
#[derive(Clone, Debug)]
pub struct ScriptedPolicy {
    pub preference: Vec<usize>,
}

impl ScriptedPolicy {
    /// Keep the current speed where allowed.
    pub fn hold() -> Self {
        ScriptedPolicy {
            preference: vec![HOLD, 4, 5, 6],
        }
    }

    /// Brake as hard as possible.
    pub fn brake() -> Self {
        ScriptedPolicy {
            preference: vec![6, 5, 4, HOLD],
        }
    }

    /// Accelerate as hard as allowed.
    pub fn full_speed() -> Self {
        ScriptedPolicy {
            preference: vec![2, 1, 0, HOLD, 4, 5, 6],
        }
    }
}

impl Policy for ScriptedPolicy {
    fn act(&mut self, obs: &Observations) -> Result<Vec<usize>> {
        obs.masks
            .iter()
            .map(|m| {
                self.preference
                    .iter()
                    .copied()
                    .find(|&a| m[a])
                    .or_else(|| m.iter().position(|&ok| ok))
                    .ok_or_else(|| Error::contract("mask without legal action"))
            })
            .collect()
    }
}

/// What to keep from a rollout besides the metrics.
#[derive(Clone, Copy, Debug, Default)]
pub struct Record {
    pub episode: bool,
    pub trajectory: bool,
}

#[derive(Clone, Debug)]
pub struct RolloutResult {
    pub reward: f64,
    pub steps: usize,
    pub metrics: MetricsRecord,
    pub step_summaries: Vec<StepSummary>,
    pub episode: Option<Episode>,
    pub trajectory: Vec<TrajectoryRow>,
    pub collisions: Vec<CollisionRow>,
}

/// Runs one episode from `env.reset(seed)` to termination.
pub fn rollout(
    env: &mut IntersectionEnv,
    policy: &mut dyn Policy,
    seed: u64,
    index: usize,
    record: Record,
) -> Result<RolloutResult> {
    let mut obs = env.reset(seed);
    policy.reset();
    let mut acc = MetricsAccumulator::new(env.simulator().config.dt);
    let mut trajectory = Vec::new();
    let keep =
        |env: &IntersectionEnv, acc: &mut MetricsAccumulator, traj: &mut Vec<TrajectoryRow>| {
            let st = env.sim_state();
            acc.observe_state(st);
            if record.trajectory {
                traj.extend(
                    st.vehicles
                        .iter()
                        .map(|v| TrajectoryRow::from_vehicle(st.step, v)),
                );
            }
        };
    keep(env, &mut acc, &mut trajectory);
    let mut episode = record.episode.then(|| Episode::new(obs.clone()));
    let mut reward = 0.0;
    let mut steps = 0;
    loop {
        let actions = policy.act(&obs)?;
        let tr = env.step(&actions)?;
        steps += 1;
        reward += tr.reward.clipped;
        keep(env, &mut acc, &mut trajectory);
        if let Some(ep) = episode.as_mut() {
            ep.push(actions, tr.reward.clipped, tr.done, tr.next.clone());
        }
        obs = tr.next;
        if tr.done {
            break;
        }
    }
    let collisions: Vec<CollisionRow> = env
        .sim_state()
        .collisions
        .iter()
        .map(|c| CollisionRow {
            t: c.step,
            a: c.a,
            b: c.b,
        })
        .collect();
    acc.add_collisions(collisions.len());
    Ok(RolloutResult {
        reward,
        steps,
        metrics: acc.finish(index, Some(reward)),
        step_summaries: acc.steps,
        episode,
        trajectory,
        collisions,
    })
}
