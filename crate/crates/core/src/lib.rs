//! Inverse-intensity weighted estimation of marginal regression models for
//! longitudinal data with irregular, possibly informative visit times.
//!
//! The pipeline runs from a counting-process [`data::Dataset`] through a
//! Q-weighted proportional-intensity fit ([`cox`]), visit weights
//! ([`weights`]) and weighted estimating equations ([`gee`]). [`inference`]
//! wraps the pipeline in resampling and sensitivity sweeps, [`calibration`]
//! suggests a range for the sensitivity parameter and [`simlab`] generates
//! and scores simulated studies.

pub mod calibration;
pub mod cox;
pub mod data;
pub mod error;
pub mod gee;
pub mod inference;
mod linalg;
pub mod par;
pub mod risk;
pub mod rng;
pub mod simlab;
pub mod weights;

pub use error::{Error, Result};
