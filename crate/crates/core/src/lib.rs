//! Recurrent fully convolutional DenseNets with hierarchical temporal filtering.

pub mod config;
pub mod dataset;
pub mod engine;
pub mod mnist;
pub mod models;
pub mod error;
pub mod grid;
pub mod nn;
pub mod params;
pub mod report;
pub mod scene;
pub mod tensor;
#[cfg(test)]
mod test_support;
pub mod train;

pub use engine::{Gradients, Tape, Var};
pub use error::{ConfigError, DatasetError, MnistError, NnError, SceneError, TrainError};
pub use params::{ParamKind, ParamStore, Session};
pub use tensor::{Float, Tensor};
