//! Content-aware weighted matrix factorization for implicit-feedback music
//! recommendation.
//!
//! The pipeline has four stages, each in its own module:
//!
//! - [`ingest`]: parse playcount triples, filter inactive users/items,
//!   binarize and split into train / validation / test sets, including a
//!   held-out (cold-start) song set.
//! - [`features`]: turn a per-song descriptor table into a compact set of
//!   oblique factors (standardization, PCA, oblimin rotation, regression
//!   scores).
//! - [`cf`]: weighted matrix factorization with exact alternating updates,
//!   optionally with item priors centred on a linear map of the content
//!   factors, which makes cold-start prediction possible.
//! - [`eval`]: ranked lists, NDCG and the pure-content baseline.
//!
//! [`pipeline`] ties them together behind a single run configuration and is
//! what the `avdrec` binary drives.

pub mod cf;
pub mod error;
pub mod eval;
pub mod features;
pub mod ingest;
mod matfile;
pub mod pipeline;

pub use error::{Error, Result};
