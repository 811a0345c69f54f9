//! Graph neural networks for transductive node classification, built around
//! dynamic neighborhood aggregation (DNA): every edge attends over the full
//! representation history of its neighbor, with grouped projections keeping
//! the parameter count in check. GCN and jumping-knowledge baselines share the
//! same pipeline.
//!
//! Everything runs on a small reverse-mode differentiation tape over dense
//! `f64` tensors ([`tensor`]).

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod layers;
pub mod presets;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
