//! Dense tensors, reverse-mode autodiff and the convolution building blocks.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_many, grad_check_params, grad_check_params_step, STEP as GRAD_CHECK_STEP};
pub use graph::{CustomOp, Gradients, Graph, Var};
pub use layers::{dropout, glu, Causality, Conv1d, ConvBlock, Embedding, ForwardCtx, Linear};
pub use optim::OptimizerState;
pub use tensor::{Module, Tensor, TensorId};

#[doc(hidden)]
pub use tensor::join as join_path;
