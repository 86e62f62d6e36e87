use serde::{Deserialize, Serialize};

use super::fuel::FuelParams;
use super::idm::IdmParams;
use super::network::{Approach, Geometry, RoadNetwork};
use crate::error::{Error, Result};

/// Traffic inflow at the lane entrances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    /// Vehicles per hour per lane.
    pub density: f64,
    /// Disables inflow entirely (only the initial agents drive).
    pub enabled: bool,
    /// Relative half-width of the uniform headway jitter.
    pub jitter: f64,
    /// Uniform range of entry speeds (m/s).
    pub speed_range: [f64; 2],
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            density: 150.0,
            enabled: true,
            jitter: 0.2,
            speed_range: [5.0, 15.0],
        }
    }
}

impl FlowConfig {
    /// Nominal headway in seconds between entries on one lane.
    pub fn mean_headway(&self) -> f64 {
        3600.0 / self.density
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub approaches: Vec<Approach>,
    pub lane_length: f64,
    pub lane_width: f64,
    pub exit_length: f64,
    pub vehicle_length: f64,
    pub max_speed: f64,
    pub min_speed: f64,
    /// Simulation step (s).
    pub dt: f64,
    pub episode_steps: usize,
    /// Collision threshold on relative distance (m).
    pub safe_distance: f64,
    /// Symmetric bound applied to every acceleration (m/s²).
    pub accel_limit: f64,
    /// Uniform range of the initial agent positions along the approach (m).
    pub initial_position: [f64; 2],
    /// Uniform range of the initial agent speeds (m/s).
    pub initial_speed: [f64; 2],
    pub flow: FlowConfig,
    pub idm: IdmParams,
    pub fuel: FuelParams,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            approaches: Approach::ALL.to_vec(),
            lane_length: 100.0,
            lane_width: 3.2,
            exit_length: 10.0,
            vehicle_length: 5.0,
            max_speed: 15.0,
            min_speed: 2.0,
            dt: 0.1,
            episode_steps: 200,
            safe_distance: 0.2,
            accel_limit: 3.5,
            initial_position: [0.0, 60.0],
            initial_speed: [5.0, 15.0],
            flow: FlowConfig::default(),
            idm: IdmParams::default(),
            fuel: FuelParams::default(),
        }
    }
}

impl ScenarioConfig {
    /// The reduced two-road scenario (south and east approaches, 4 agents).
    pub fn two_road() -> Self {
        ScenarioConfig {
            approaches: vec![Approach::South, Approach::East],
            ..Self::default()
        }
    }

    pub fn agents(&self) -> usize {
        2 * self.approaches.len()
    }

    pub fn network(&self) -> RoadNetwork {
        RoadNetwork::with_approaches(
            Geometry {
                lane_length: self.lane_length,
                lane_width: self.lane_width,
                exit_length: self.exit_length,
            },
            &self.approaches,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.approaches.is_empty() {
            return err("at least one approach is required".into());
        }
        let mut seen = self.approaches.clone();
        seen.sort_by_key(|a| *a as u8);
        seen.dedup();
        if seen.len() != self.approaches.len() {
            return err("approaches must be distinct".into());
        }
        for (name, v) in [
            ("lane_length", self.lane_length),
            ("lane_width", self.lane_width),
            ("vehicle_length", self.vehicle_length),
            ("max_speed", self.max_speed),
            ("dt", self.dt),
            ("safe_distance", self.safe_distance),
            ("accel_limit", self.accel_limit),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return err(format!("{name} must be positive, got {v}"));
            }
        }
        if self.exit_length < self.vehicle_length {
            return err("exit_length must be at least the vehicle length".into());
        }
        if self.episode_steps == 0 {
            return err("episode_steps must be positive".into());
        }
        if self.flow.enabled && !(self.flow.density > 0.0) {
            return err(format!(
                "density must be positive, got {}",
                self.flow.density
            ));
        }
        if !(0.0..1.0).contains(&self.flow.jitter) {
            return err("flow.jitter must lie in [0, 1)".into());
        }
        for (name, [lo, hi]) in [
            ("flow.speed_range", self.flow.speed_range),
            ("initial_speed", self.initial_speed),
        ] {
            if !(0.0 <= lo && lo <= hi && hi <= self.max_speed) {
                return err(format!("{name} must lie within [0, max_speed]"));
            }
        }
        let [p0, p1] = self.initial_position;
        if !(0.0 <= p0 && p0 <= p1 && p1 <= self.lane_length) {
            return err("initial_position must lie within the approach lane".into());
        }
        self.idm.validate()
    }
}
