//! Continual-learning lab: inject arithmetic into a small masked language
//! model and limit catastrophic forgetting with Elastic Weight
//! Consolidation.

pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod error;
pub mod evalanalysis;
pub mod fisher;
pub mod graph;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod training;
pub mod util;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
