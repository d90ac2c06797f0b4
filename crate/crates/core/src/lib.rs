//! Generative list re-ranking with entropy-guided latent reasoning.
//!
//! The crate is organised bottom-up:
//!
//! * [`nn`]: dense tensors, reverse-mode autodiff, transformer layers.
//! * [`sim`]: synthetic users/items, click simulator, JSONL logs.
//! * [`evaluator`]: the dual-head list reward model and its pre-training.
//! * [`generator`]: the set encoder + autoregressive decoder policy with
//!   entropy-triggered reasoning tokens.
//! * [`training`]: rewards, group-relative advantages, policy-gradient loss,
//!   Adam, and the on-policy training loop.
//! * [`metrics`]: MAP/NDCG, evaluator score, Pass@K, entropy and
//!   efficiency reports.
//! * [`config`] and [`checkpoint`]: experiment configuration and model files.

pub mod checkpoint;
pub mod config;
mod error;
pub mod evaluator;
pub mod generator;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod sim;
pub mod training;

pub use error::{Error, Result};
