//! Hierarchical sentence labeling for medical abstracts.
//!
//! Each abstract is a sequence of sentences. A word-level bi-LSTM with
//! attentive pooling turns every sentence into a vector, a sentence-level
//! bi-LSTM contextualizes those vectors across the abstract, and a
//! linear-chain CRF decodes the label sequence. Training can be regularized
//! with adversarial and virtual adversarial perturbations applied to the
//! normalized word embeddings.
//!
//! The crate is `no_std` (it needs `alloc`) and performs no IO. File formats,
//! checkpoints and the command line live in the `picotag` crate.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod adversarial;
pub mod corpus;
pub mod crf;
pub mod embeddings;
mod error;
pub mod evaluation;
pub mod hash;
pub mod math;
pub mod model;
pub mod numeric;
pub mod optim;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
pub use numeric::tensor::Tensor;
