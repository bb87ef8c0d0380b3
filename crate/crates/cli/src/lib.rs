//! Tiling, training, inference, evaluation, ablation and plotting commands
//! for the context-aware rotated-box detector.

pub mod ablate;
pub mod dataset;
pub mod eval;
pub mod experiment;
pub mod infer;
pub mod plot;
pub mod synthetic;
pub mod tile;
pub mod train;

pub use experiment::{DatasetKind, ExperimentConfig};
