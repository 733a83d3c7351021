//! Doubly robust estimation of average treatment effects via Bayesian
//! regression synthesis (BRS-DR).
//!
//! The crate fits several candidate propensity and outcome models
//! ("agents"), synthesizes their predictive distributions with
//! covariate-dependent weights driven by nearest-neighbor Gaussian-process
//! priors, and turns the synthesized nuisance functions into a Bayesian
//! bootstrap posterior for the ATE. A configuration-driven harness
//! reproduces the accompanying simulation benchmarks and the birth-weight
//! empirical study at desk scale.

pub mod agents;
pub mod datamodel;
pub mod dgp;
pub mod drposterior;
pub mod error;
pub mod harness;
pub mod nngp;
pub mod rng;
pub mod synthesis;

pub use error::{BrsError, Result};
