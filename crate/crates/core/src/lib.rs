//! Semi-supervised few-shot classification over frozen feature embeddings.
//!
//! The engine adapts a linear head on ℓ2-normalized features using a small
//! labeled support set and a pool of unlabeled samples. Unlabeled samples are
//! pseudo-labeled *negatively*: each round excludes the least likely class of
//! every sample whose lowest probability falls under a reject threshold, until
//! only one candidate class remains, which then serves as a positive label.
//!
//! Module map:
//!
//! * [`feature_store`]: the `FSFEAT01` binary embedding format, manifests, and
//!   a synthetic Gaussian generator.
//! * [`episode`]: N-way K-shot episode sampling (inductive, transductive,
//!   distractive).
//! * [`classifier`]: linear head, masked softmax, the three losses with
//!   analytic gradients, and a full-batch SGD trainer.
//! * [`engine`]: the successive-exclusion loop and its ablation modes.
//! * [`evaluation`]: per-episode diagnostics, aggregation with 95% CIs,
//!   report serialization, and the parallel episode runner.
//! * [`cli`]: the `music` command-line front end.

pub mod classifier;
pub mod cli;
pub mod engine;
pub mod episode;
mod error;
pub mod evaluation;
pub mod feature_store;
pub mod rng;

pub use error::{Error, Result};
