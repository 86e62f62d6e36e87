//! Multi-agent environment over the simulator.
//!
//! One agent slot per approach lane; agents act on their bound CAV with a
//! discrete acceleration, receive local observations and share a clipped
//! team reward.

mod episode;
mod rollout;

use serde::{Deserialize, Serialize};

pub use episode::Episode;
pub use rollout::{rollout, Policy, RandomPolicy, Record, RolloutResult, ScriptedPolicy};

use crate::error::{Error, Result};
use crate::numcore::Matrix;
use crate::sim::{ScenarioConfig, SimState, Simulator, StepReport, VehicleId};

/// Accelerations (m/s²) by action index.
pub const ACTIONS: [f64; 7] = [1.5, 2.5, 3.5, 0.0, -1.5, -2.5, -3.5];
pub const N_ACTIONS: usize = ACTIONS.len();
pub const HOLD: usize = 3;
pub const DECELERATIONS: [usize; 3] = [4, 5, 6];
/// `[x, y, v]` followed by the previous-action one-hot.
pub const OBS_DIM: usize = 3 + N_ACTIONS;

pub type ActionMask = [bool; N_ACTIONS];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardParams {
    /// Penalty per agent below the minimum speed.
    pub alpha1: f64,
    /// Weight on normalized speed.
    pub alpha2: f64,
    /// Penalty per agent involved in a collision.
    pub alpha3: f64,
    /// Clip every step reward to `clip_range`.
    pub clip: bool,
    pub clip_range: [f64; 2],
}

impl Default for RewardParams {
    fn default() -> Self {
        RewardParams {
            alpha1: 0.5,
            alpha2: 1.0,
            alpha3: 5.0,
            clip: true,
            clip_range: [-5.0, 10.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub reward: RewardParams,
    /// Head-to-tail distance below which only decelerations are legal (m).
    pub mask_gap: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            reward: RewardParams::default(),
            mask_gap: 5.0,
        }
    }
}

/// Unclipped and clipped components of one team reward.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Reward {
    pub efficiency: f64,
    pub collision: f64,
    pub raw: f64,
    pub clipped: f64,
}

/// Team reward for one step.
///
/// `agent_speeds` holds the normalized speed of the vehicle each slot
/// controlled during the step (`None` for unbound slots);
/// `collided` lists the slots involved in a new collision.
pub fn team_reward(
    agent_speeds: &[Option<f64>],
    collided: &[usize],
    v_min_norm: f64,
    params: &RewardParams,
) -> Reward {
    let mut efficiency = 0.0;
    for v in agent_speeds.iter().flatten() {
        if *v < v_min_norm {
            efficiency -= params.alpha1;
        }
        efficiency += params.alpha2 * v;
    }
    let collision = -params.alpha3 * collided.len() as f64;
    let raw = efficiency + collision;
    let clipped = if params.clip {
        raw.clamp(params.clip_range[0], params.clip_range[1])
    } else {
        raw
    };
    Reward {
        efficiency,
        collision,
        raw,
        clipped,
    }
}

/// What the learners see after `reset` or `step`.
#[derive(Clone, Debug, PartialEq)]
pub struct Observations {
    /// `agents × OBS_DIM`.
    pub obs: Matrix,
    /// Concatenation of the observation rows in slot order.
    pub state: Vec<f64>,
    pub masks: Vec<ActionMask>,
    /// Vehicle controlled by each slot.
    pub vehicles: Vec<Option<VehicleId>>,
}

#[derive(Clone, Debug)]
pub struct Transition {
    pub next: Observations,
    pub reward: Reward,
    pub done: bool,
    pub report: StepReport,
}

pub struct IntersectionEnv {
    sim: Simulator,
    config: EnvConfig,
    state: SimState,
    prev_actions: Vec<Option<usize>>,
    t: usize,
}

impl IntersectionEnv {
    pub fn new(scenario: ScenarioConfig, config: EnvConfig) -> Result<Self> {
        let sim = Simulator::new(scenario)?;
        let state = sim.empty_state();
        let n = sim.lanes();
        Ok(IntersectionEnv {
            sim,
            config,
            state,
            prev_actions: vec![None; n],
            t: 0,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.sim.lanes()
    }

    pub fn state_dim(&self) -> usize {
        self.n_agents() * OBS_DIM
    }

    pub fn episode_limit(&self) -> usize {
        self.sim.config.episode_steps
    }

    pub fn simulator(&self) -> &Simulator {
        &self.sim
    }

    pub fn sim_state(&self) -> &SimState {
        &self.state
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    pub fn v_min_norm(&self) -> f64 {
        self.sim.config.min_speed / self.sim.config.max_speed
    }

    pub fn reset(&mut self, seed: u64) -> Observations {
        let state = self.sim.reset(seed);
        self.reset_to(state)
    }

    /// Starts an episode from a prepared simulator state.
    pub fn reset_to(&mut self, state: SimState) -> Observations {
        self.state = state;
        self.prev_actions = vec![None; self.n_agents()];
        self.t = 0;
        self.observations()
    }

    /// Local observation of slot `agent`; zeros when the slot is unbound.
    pub fn observe(&self, agent: usize) -> [f64; OBS_DIM] {
        let mut o = [0.0; OBS_DIM];
        let Some(veh) = self.state.bound_vehicle(agent) else {
            return o;
        };
        let (x, y) = self.sim.network.routes[veh.route].position(veh.s);
        let extent = self.sim.network.control_extent();
        o[0] = x / extent;
        o[1] = y / extent;
        o[2] = (veh.v / self.sim.config.max_speed).clamp(0.0, 1.0);
        if let Some(a) = self.prev_actions[agent] {
            o[3 + a] = 1.0;
        }
        o
    }

    pub fn legal_actions(&self, agent: usize) -> ActionMask {
        let mut mask = [false; N_ACTIONS];
        let Some(veh) = self.state.bound_vehicle(agent) else {
            mask[HOLD] = true;
            return mask;
        };
        if self.state.gap_to_leader(veh.id) < self.config.mask_gap {
            for d in DECELERATIONS {
                mask[d] = true;
            }
            return mask;
        }
        let (dt, v_max) = (self.sim.config.dt, self.sim.config.max_speed);
        for (m, &a) in mask.iter_mut().zip(&ACTIONS) {
            *m = veh.v + a * dt <= v_max + 1e-9;
        }
        if !mask.iter().any(|&m| m) {
            mask[HOLD] = true;
        }
        mask
    }

    pub fn observations(&self) -> Observations {
        let n = self.n_agents();
        let mut obs = Matrix::zeros(n, OBS_DIM);
        for a in 0..n {
            obs.row_mut(a).copy_from_slice(&self.observe(a));
        }
        Observations {
            state: obs.data().to_vec(),
            obs,
            masks: (0..n).map(|a| self.legal_actions(a)).collect(),
            vehicles: (0..n)
                .map(|a| self.state.bound_vehicle(a).map(|v| v.id))
                .collect(),
        }
    }

    fn is_done(&self) -> bool {
        self.t >= self.episode_limit() || self.state.slots.iter().all(Option::is_none)
    }

    /// Applies a joint action; every index must be legal under the current
    /// masks.
    pub fn step(&mut self, actions: &[usize]) -> Result<Transition> {
        let n = self.n_agents();
        if actions.len() != n {
            return Err(Error::contract(format!(
                "{} actions for {n} agents",
                actions.len()
            )));
        }
        if self.is_done() {
            return Err(Error::contract("step called on a finished episode"));
        }
        let mut commands = vec![None; n];
        for (agent, &a) in actions.iter().enumerate() {
            let mask = self.legal_actions(agent);
            if a >= N_ACTIONS || !mask[a] {
                return Err(Error::contract(format!(
                    "illegal action {a} for agent {agent}"
                )));
            }
            if self.state.slots[agent].is_some() {
                commands[agent] = Some(ACTIONS[a]);
            }
        }
        let controlled = self.state.slots.clone();
        let report = self.sim.step(&mut self.state, &commands)?;
        let v_max = self.sim.config.max_speed;
        let speeds: Vec<Option<f64>> = controlled
            .iter()
            .zip(&report.controlled_speeds)
            .map(|(slot, v)| slot.and(*v).map(|v| (v / v_max).clamp(0.0, 1.0)))
            .collect();
        let reward = team_reward(
            &speeds,
            &report.collided_slots,
            self.v_min_norm(),
            &self.config.reward,
        );
        for (prev, &a) in self.prev_actions.iter_mut().zip(actions) {
            *prev = Some(a);
        }
        self.t += 1;
        Ok(Transition {
            next: self.observations(),
            reward,
            done: self.is_done(),
            report,
        })
    }
}
