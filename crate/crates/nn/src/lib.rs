//! Convolutional detection network with context modules, trained with a
//! small reverse-mode autograd engine.

pub mod checkpoint;
pub mod config;
pub mod graph;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;

pub use config::{KvConfig, ModelConfig, Switches};
pub use graph::{Graph, Var};
pub use model::{Detections, Detector, LossTerms, Proposal};
pub use params::ParamStore;
pub use tensor::{Real, Tensor};
