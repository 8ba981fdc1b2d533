//! TriPINet: three-stream (RGB, frequency, noise) image forgery localization.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod frequency;
pub mod fusion;
pub mod graph;
pub mod harness;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod noise;
pub mod optim;
pub mod params;
pub mod plot;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
