//! Experiment recipes over the synthetic task.

pub mod config;
pub mod pipeline;
pub mod recipes;

pub use config::{BacktranslationMode, ExperimentConfig, Recipe};
pub use pipeline::*;
pub use recipes::*;
