//! Longitudinal micro-simulation of the junction.

pub mod fuel;
pub mod idm;
pub mod network;
pub mod scenario;
pub mod state;

pub use fuel::FuelParams;
pub use idm::IdmParams;
pub use network::{Approach, Geometry, Movement, RoadNetwork, Route};
pub use scenario::{FlowConfig, ScenarioConfig};
pub use state::{
    detect_collisions, step_kinematics, CollisionEvent, SimState, Simulator, StepReport, Vehicle,
    VehicleId, VehicleKind,
};
