//! Differentially private fine-tuning of feedforward neural language models.
//!
//! A base model is trained without privacy on a public corpus, then tuned on
//! a private corpus with DPSGD (per-example clipping plus Gaussian noise).
//! The privacy cost of the tuning run is tracked in a ledger and converted to
//! an `(epsilon, delta)` guarantee by a moments accountant.
//!
//! Modules, bottom up:
//! - [`corpus`]: vocabulary, sentence encoding, context windows, splits
//! - [`numerics`]: parameter layout, forward pass, backprop, finite differences
//! - [`model`]: architectures, batch loss, perplexity, generation
//! - [`optimizer`]: clipping, DPSGD, Adam, the training loop
//! - [`accountant`]: log-moment composition and epsilon conversion
//! - [`experiment`]: the four-model comparison pipeline

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod model;
pub mod numerics;
pub mod optimizer;

pub use error::{Error, Result};
