//! Minimal differentiable building blocks: a reverse-mode tape over dense
//! f64 tensors, the layers both encoders are assembled from, a finite
//! difference gradient checker and named-tensor persistence.

mod graph;
mod gradcheck;
mod io;
mod kernels;
mod layers;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use gradcheck::{grad_check, grad_check_steps, GradCheckReport};
pub use io::{load_tensors, save_tensors, TENSOR_FORMAT_VERSION};
pub use layers::{Conv2d, LayerNorm, Linear, TransformerBlock, LN_EPS};
pub use params::{Init, Param, ParamId, ParamStore};
pub use tensor::Tensor;

#[allow(unused_imports)]
pub(crate) use kernels::{log_softmax_row, sigmoid, softmax_row};
