//! Synthetic scenes with known ground truth, experiment configuration, the
//! staged experiment runner and its evaluation metrics.

pub mod config;
pub mod error;
pub mod metrics;
pub mod runner;
pub mod synth;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
pub use runner::{run_experiment, Report};
pub use synth::{synthesize_scene, SceneDataset};
