//! Offline simulator learning from reward-free transition datasets.
//!
//! Stage 1 jointly fits a discriminator-style reward `r(s, s')` and a
//! high-entropy Gaussian dynamics ensemble; stage 2 trains a policy purely
//! inside that learned environment. The [`harness`] module wires both stages
//! to toy control tasks for end-to-end experiments.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod data;
pub mod envs;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod policy;
pub mod rng;
pub mod simulator;

pub use error::{Error, Result};
