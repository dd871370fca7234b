//! Meta-learned spline activation functions for MLPs, the total-variation
//! complexity toolkit used to analyze them, and the task suite (algorithmic,
//! tabular, image, collage) the experiments run on.

pub mod autograd;
pub mod complexity;
pub mod error;
pub mod experiments;
pub mod metalearn;
pub mod nets;
pub mod splines;
pub mod tasks;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
