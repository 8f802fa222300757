//! Damping-factor identification for a second-order system: simulation,
//! dataset generation, spectrogram features, recurrent regressors trained from
//! scratch, and experiment evaluation.

pub mod container;
pub mod dataset;
pub mod error;
pub mod experiments;
pub mod features;
pub mod nn;
pub mod seed;
pub mod sim;

pub use error::{Error, Result};
