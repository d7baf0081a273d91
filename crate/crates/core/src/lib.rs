//! Desk-scale depth decoder toolkit: a small tensor and autodiff core,
//! the refinement, resampling, fusion and disparity modules built on it,
//! depth metrics with scale alignment, and a synthetic training harness.

pub mod certify;
pub mod disparity;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod param;
pub mod refine;
pub mod resample;
pub mod scalar;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use param::{Init, Param, ParamId, ParamStore};
pub use scalar::{DType, Float};
pub use tensor::Tensor;
