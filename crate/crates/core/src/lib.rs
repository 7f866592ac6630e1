//! Classifiers whose feature space is a Gaussian mixture with fixed,
//! maximally separated class means, trained discriminatively, generatively
//! or jointly, with samplers, out-of-distribution scores, calibration and
//! adversarial-robustness evaluation.

pub mod centroids;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod net;
pub mod optim;
pub mod sampler;
pub mod train;

pub use error::{Error, Result};
