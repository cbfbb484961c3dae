//! Vision-token projection with a caller-chosen token count, stochastic
//! per-batch token scheduling, and a desk-scale vision-language harness that
//! trains and evaluates both on synthetic data.

pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod decoder;
pub mod error;
pub mod gradsuite;
pub mod params;
pub mod plot;
pub mod projector;
pub mod rng;
pub mod schedule;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
