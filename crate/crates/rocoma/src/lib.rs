//! Robust constrained multi-agent policy-gradient engine for electric-vehicle
//! rebalancing on a grid city.
//!
//! The crate bundles a discrete-time fleet simulator, small hand-rolled
//! neural networks with exact score gradients, a contamination-robust critic
//! and natural-gradient estimator, a Lagrangian-constrained trainer, and a
//! set of reference rebalancing policies plus an evaluation harness. The
//! `rocoma` binary exposes training, evaluation, and report comparison.

pub mod baselines;
pub mod critic;
pub mod error;
pub mod harness;
pub mod mdp;
pub mod nn;
pub mod rnpg;
pub mod seed;
pub mod sim;
pub mod tabular;
pub mod trainer;

pub use error::{Error, Result};
