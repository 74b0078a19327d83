pub mod boxes;
pub mod config;
pub mod detector;
pub mod error;
pub mod eval;
pub mod nets;
pub mod priors;
pub mod sampling;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
