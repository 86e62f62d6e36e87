use std::io::Write;
use std::path::Path;

use super::{ActionMask, Observations, N_ACTIONS, OBS_DIM};
use crate::error::{Error, Result};
use crate::numcore::Matrix;

/// One recorded episode.
///
/// Per-step vectors with `len() + 1` entries include the observation after
/// the final step. The global state is not stored separately; it is the
/// concatenation of the observation rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub n_agents: usize,
    /// `agents × OBS_DIM` per step.
    pub obs: Vec<Matrix>,
    pub masks: Vec<Vec<ActionMask>>,
    pub actions: Vec<Vec<usize>>,
    /// Team reward as emitted by the environment (clipped when enabled).
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
}

impl Episode {
    pub fn new(first: Observations) -> Self {
        Episode {
            n_agents: first.obs.rows(),
            obs: vec![first.obs],
            masks: vec![first.masks],
            actions: Vec::new(),
            rewards: Vec::new(),
            dones: Vec::new(),
        }
    }

    pub fn push(&mut self, actions: Vec<usize>, reward: f64, done: bool, next: Observations) {
        self.actions.push(actions);
        self.rewards.push(reward);
        self.dones.push(done);
        self.obs.push(next.obs);
        self.masks.push(next.masks);
    }

    /// Global state at step `t`: the observation rows in slot order.
    pub fn state(&self, t: usize) -> &[f64] {
        self.obs[t].data()
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    /// Ended by a terminal condition rather than being cut short.
    pub fn terminated(&self) -> bool {
        self.dones.last().copied().unwrap_or(false)
    }

    pub fn check(&self) -> Result<()> {
        let t = self.len();
        let ok = self.obs.len() == t + 1
            && self.masks.len() == t + 1
            && self.rewards.len() == t
            && self.dones.len() == t
            && self
                .obs
                .iter()
                .all(|o| o.shape() == (self.n_agents, OBS_DIM))
            && self
                .actions
                .iter()
                .all(|a| a.len() == self.n_agents && a.iter().all(|&i| i < N_ACTIONS));
        if ok {
            Ok(())
        } else {
            Err(Error::contract("inconsistent episode record"))
        }
    }

    /// Writes `t,reward,done,a_0..a_{N-1}` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "t,reward,done")?;
        for a in 0..self.n_agents {
            write!(w, ",a_{a}")?;
        }
        writeln!(w)?;
        for t in 0..self.len() {
            write!(w, "{t},{},{}", self.rewards[t], u8::from(self.dones[t]))?;
            for a in &self.actions[t] {
                write!(w, ",{a}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(f)
    }
}
