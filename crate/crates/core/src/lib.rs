//! Explanation-guided federated learning for slice-level CPU allocation.
//!
//! Closed loops train a small MLP on synthetic traffic/CPU data. In the
//! in-hoc mode each local epoch explains the model, mutates the most
//! influential features of in-band samples, and penalises predictions that
//! leave the SLA band through a two-player game over a Lagrange-style
//! multiplier. The post-hoc mode trains on MSE alone and explains
//! afterwards.

pub mod attribution;
pub mod confidence;
pub mod config;
pub mod datagen;
pub mod error;
pub mod federation;
pub mod game;
pub mod matrix;
pub mod model;
pub mod report;
pub mod rng;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use federation::{FederationConfig, Mode};
pub use matrix::Matrix;
pub use model::ModelParams;
