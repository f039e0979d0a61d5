//! Dense tensors and the layer primitives the model is assembled from.
//!
//! Every layer exposes a forward pass that returns its cached intermediates
//! and an analytic backward pass over that cache. There is no graph engine:
//! the architecture is fixed and each backward is checked piecewise against
//! finite differences.

pub mod gradcheck;
pub mod linear;
pub mod lstm;
pub mod rng;
pub mod softmax;
pub mod tensor;

pub use gradcheck::{gradient_check, GradCheckConfig, GradCheckReport};
pub use linear::{Linear, LinearCache};
pub use lstm::{bilstm_sequence, lstm_step, BiLstmCache, BiLstmParams, LstmCellParams};
pub use softmax::softmax;
pub use tensor::Tensor;
