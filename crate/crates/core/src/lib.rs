pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod graph;
pub mod layers;
pub mod metrics;
pub mod models;
mod ops;
pub mod params;
pub mod tensor;
pub mod training;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Mode, Var};
pub use models::{Model, ModelKind, ModelSpec};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
