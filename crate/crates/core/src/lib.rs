//! Geometry, data handling and evaluation for a context-aware oriented-object
//! detector on aerial imagery.
//!
//! The neural network lives in `cadnet-nn`; everything here is plain data
//! processing with no learned parameters.

pub mod evaluation;
pub mod geometry;
pub mod ingest;
pub mod targets;
pub mod tiling;

pub use geometry::{BoxKind, BoxShape, Hbb, Obb, Point, Quad, ScoredDetection};
pub use ingest::{AnnotatedObject, AnnotationShape, ClassVocabulary};
