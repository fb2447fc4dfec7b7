//! Desk-scale decoder-only language model built around grouped local-global
//! attention layers.
//!
//! The crate is organized around a small dense-tensor engine with reverse-mode
//! differentiation ([`tensor`], [`graph`]), on top of which sit the attention
//! strategies ([`attention`]), positional embeddings ([`posenc`]), the model
//! itself ([`model`]), incremental decoding with per-layer K-V caches
//! ([`inference`]), a closed-form cost estimator ([`complexity`]), byte-level
//! data handling ([`data`]), and the training/evaluation harness ([`trainer`]).
//! [`checks`] bundles the cross-module equivalence oracles used by the CLI.

pub mod attention;
pub mod blobio;
pub mod checks;
pub mod complexity;
pub mod data;
pub mod error;
pub mod graph;
pub mod inference;
pub mod model;
pub mod posenc;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::Error;
pub type Result<T> = std::result::Result<T, Error>;
