//! Continual learning by weight-space model averaging.
//!
//! After each task the freshly fine-tuned model is merged with the running
//! merged model, either uniformly per parameter (CoMA) or weighted by each
//! model's diagonal Fisher information (CoFiMA). The crate contains the
//! numerical substrate (a small reverse-mode autodiff, an MLP classifier with
//! a growing head), the merge rules, comparator strategies, an exact
//! quadratic oracle, metrics, and checkpoint/config persistence.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod fisher;
pub mod merge;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod runner;
pub mod strategies;
pub mod taskstream;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{ParamMask, ParamSet, Tensor};
