//! The TOML run configuration shared by all commands.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::PpoConfig;
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::qmix::QmixConfig;
use crate::sim::ScenarioConfig;

/// Everything a run depends on. Missing tables and keys take their
/// defaults, which describe the full four-road scenario.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    pub env: EnvConfig,
    pub qmix: QmixConfig,
    pub ppo: PpoConfig,
}

/// Environment-step budget of the reduced scenario.
pub const DESK_STEPS: u64 = 200_000;

impl RunConfig {
    /// Two roads, four agents, density 150 veh/h and a 200k-step budget.
    pub fn desk() -> Self {
        let mut c = RunConfig {
            scenario: ScenarioConfig::two_road(),
            ..Self::default()
        };
        c.scenario.flow.density = 150.0;
        c.set_steps(DESK_STEPS);
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        let mut s = String::with_capacity(64);
        for b in digest.iter() {
            write!(s, "{b:02x}").expect("write to string");
        }
        Ok(s)
    }

    /// Sets the training budget of every learner.
    pub fn set_steps(&mut self, steps: u64) {
        self.qmix.total_steps = steps;
        self.ppo.total_steps = steps;
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.qmix.validate()?;
        self.ppo.validate()?;
        let [lo, hi] = self.env.reward.clip_range;
        if !(lo < hi) {
            return Err(Error::Config("reward clip range must be increasing".into()));
        }
        Ok(())
    }
}
