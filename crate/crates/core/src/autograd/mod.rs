//! A small reverse-mode automatic differentiation engine.
//!
//! Tensors are dense and row-major; images use NHWC layout so that channel
//! mixing is a plain matrix product over rows.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{check_input_gradients, check_param_gradients, GradCheckReport, GRAD_FLOOR};
pub use graph::{BiasLayout, ConvGeom, Gradients, Graph, Var};
pub use params::{Adam, AdamConfig, Init, ParamId, ParamStore};
pub use tensor::{gemm, Scalar, Tensor};
