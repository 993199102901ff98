//! Synthetic data, model assembly, training, checkpoints and evaluation.

pub mod ablation;
pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod diagnostics;
pub mod evaluate;
pub mod model;
pub mod synth;
pub mod train;

pub use config::TrainConfig;
pub use model::{build_model, DsatModel};
