//! Differentiable ensemble Kalman filtering.
//!
//! The crate learns a transition model, an observation model, a sensor model
//! and an observation-noise model end to end through the prediction and
//! update steps of an ensemble Kalman filter. Process noise is never
//! modelled explicitly: the transition and sensor networks keep dropout
//! active at inference, and each ensemble member is propagated by its own
//! stochastic forward pass.
//!
//! Module map:
//!
//! - [`autodiff`]: reverse-mode differentiation over dense matrices
//! - [`snn`]: stochastic (MC-dropout) multilayer perceptrons
//! - [`filter`]: ensemble, prediction, measurement update, full step
//! - [`models`]: the four learnable networks and hybrid unicycle motion
//! - [`tasks`]: synthetic tasks, corruption, standardization, datasets
//! - [`oracles`]: exact Kalman filter, analytic EnKF, dead reckoning
//! - [`training`]: losses, Adam, training loop, checkpoints
//! - [`metrics`]: RMSE/MAE and relative pose errors over subsequences

pub mod autodiff;
pub mod error;
pub mod filter;
pub mod metrics;
pub mod models;
pub mod oracles;
pub mod rng;
pub mod snn;
pub mod tasks;
pub mod training;

pub use error::{Error, Result};
