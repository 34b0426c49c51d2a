//! Differentially private search for second-order stationary points.
//!
//! The crate provides perturbed SGD driven by private gradient oracles
//! (including an adaptive variance-reduced oracle and its distributed
//! variant), private selection among candidate outputs, exact verification of
//! the returned point on synthetic objectives, and an experiment harness.

pub mod error;
pub mod harness;
pub mod linalg;
pub mod objectives;
pub mod oracles;
pub mod params;
pub mod privacy;
pub mod psgd;
pub mod rng;
pub mod select;
pub mod vector;
pub mod verify;

pub use error::{Error, Result};
pub use objectives::{build as build_objective, DatasetBudget, Objective, ObjectiveOptions, ObjectiveSpec, Sample};
pub use params::{derive_params, LossBounds, NoiseProfile, ParamConstants, PsgdParams};
pub use rng::SeededRng;
pub use vector::Vector;
