//! Dataset distillation into per-class Gaussian latent priors plus a small
//! decoder, trained by matching expert training trajectories and minimizing
//! class-wise maximum mean discrepancy in expert feature space; federated
//! class-space decomposition for scale; and a three-metric evaluation
//! (storage bytes, downstream wall-clock, recovery accuracy).

pub mod bundle;
pub mod config;
pub mod data;
pub mod decoder;
pub mod distiller;
pub mod error;
pub mod eval;
pub mod experts;
pub mod federated;
pub mod latent;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod util;

pub use error::{Error, Result};
