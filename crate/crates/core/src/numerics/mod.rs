//! Deterministic `f64` tensor substrate: dense linear algebra, activations,
//! convolutions, top-k selection and a finite-difference gradient oracle.

pub mod activation;
pub mod conv;
pub mod flops;
pub mod gradcheck;
pub mod linalg;
pub mod par;
pub mod tensor;
pub mod topk;

pub use activation::{gelu, layer_norm, softmax_rows, softmax_rows_backward, MASKED_LOGIT};
pub use conv::{conv3x3, depthwise_conv3x3, pixel_shuffle, pixel_unshuffle};
pub use gradcheck::{finite_diff_grad, relative_error};
pub use linalg::{gather_rows, linear, matmul, scatter_add_rows};
pub use tensor::{Grad, Tensor};
pub use topk::{argmax, topk};
