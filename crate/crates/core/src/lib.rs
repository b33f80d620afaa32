//! Unsupervised cross-region adaptation for irregularly sampled pixel-set
//! time series by temporal shift estimation and EMA-teacher self-training.

pub mod adapt;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod predictor;
pub mod rng;
pub mod shift;

pub use error::{Error, Result};
