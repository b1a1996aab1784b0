//! Learned P-frame video codec: differentiable networks, entropy models, an
//! arithmetic coder, motion compensation, and rate allocation across models.

pub mod allocator;
pub mod autograd;
pub mod entropy;
pub mod error;
pub mod metrics_io;
pub mod motion;
pub mod pipeline;
pub mod range_coder;
pub mod transforms;

pub use error::{Error, Result};
