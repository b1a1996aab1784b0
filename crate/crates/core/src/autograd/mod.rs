//! Minimal reverse-mode automatic differentiation over rank-4 image tensors.

mod conv;
mod graph;
pub mod layers;
mod params;
mod tensor;

pub use graph::{Graph, Var, LIKELIHOOD_FLOOR, SIGMA_MIN};
pub(crate) use graph::{sigmoid, softplus, BilinearSample};
pub use params::{ParameterSet, PFWT_MAGIC, PFWT_VERSION};
pub use tensor::Tensor;
