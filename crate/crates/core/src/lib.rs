//! Cooperative control of connected automated vehicles at a non-signalized
//! intersection.
//!
//! The crate is layered bottom-up:
//!
//! * [`numcore`] dense matrices, a small reverse-mode tape, initializers and
//!   optimizers.
//! * [`sim`] a deterministic longitudinal micro-simulator with IDM-driven
//!   human vehicles.
//! * [`env`] the multi-agent environment wrapper (observations, masks, team
//!   reward, fixed-length episodes).
//! * [`qmix`] monotonic value factorization with Peng's Q(λ) targets.
//! * [`baselines`] IQL, VDN and PPO comparison learners.
//! * [`metrics`] per-episode evaluation metrics and the trajectory dump.

pub mod baselines;
pub mod config;
pub mod env;
pub mod error;
pub mod metrics;
pub mod numcore;
pub mod qmix;
pub mod run;
pub mod sim;
pub mod training;

pub use error::{Error, Result};
