//! Minimal dense numerics: matrices, a reverse-mode tape covering the ops
//! the learners need, initializers, optimizers and the checkpoint format.

pub mod checkpoint;
pub mod init;
pub mod layers;
mod matrix;
pub mod ops;
pub mod optim;
mod params;
pub mod tape;

pub use layers::{GruParams, InitScheme};
pub use matrix::Matrix;
pub use ops::sigmoid;
pub use optim::{AdamConfig, AdamState, Optimizer, RmsPropConfig, RmsPropState};
pub use params::{Gradients, ParamStore};
pub use tape::{Tape, Var};
