//! One-shot scene graph generation with relational and commonsense knowledge.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`autodiff`], [`nn`]: dense `f64` tensors, a reverse-mode tape,
//!   graph convolution, SGD and gradient checking.
//! - [`data`]: annotations, detector-output surrogates, the one-shot split and
//!   the frequency prior.
//! - [`relational`], [`commonsense`]: the two knowledge extractors.
//! - [`irt`]: the instance relation transformer and the label refiner.
//! - [`head`]: feature fusion and DistMult predicate scoring.
//! - [`eval`]: graph-constrained ranking and Recall@K.
//! - [`model`], [`config`], [`checkpoint`], [`pipeline`]: the assembled model,
//!   experiment configuration, checkpoints and end-to-end train/eval.

pub mod autodiff;
pub mod checkpoint;
pub mod commonsense;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod head;
pub mod irt;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod relational;
pub mod tensor;

pub use autodiff::{Gradients, ParamStore, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
