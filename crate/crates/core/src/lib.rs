//! Trajectory prediction for vehicle actors with a differentiable kinematic
//! bicycle model as the decoder of a learned predictor, plus the
//! unconstrained and constrained baselines it is compared against, a
//! winner-takes-all multimodal training loss, a synthetic scenario
//! generator, and the evaluation-metric suite.

pub mod autodiff;
pub mod datagen;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod jsonio;
pub mod kinematics;
pub mod models;
pub mod training;

pub use error::{Error, Result};
