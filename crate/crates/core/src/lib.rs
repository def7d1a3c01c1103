//! Deep Q-network voltage control for a DC-DC buck converter feeding a
//! constant power load, and its transfer to a mismatched plant through a
//! steady-state duty-ratio mapping.
//!
//! Pipeline: train on the ideal averaged model ([`training`]), run the frozen
//! policy on the hardware surrogate, fit the duty map from a steady-state
//! sweep ([`transfer`]) and compare both runs on load-step scenarios ([`eval`]).

// `!(x > lo)` is used on purpose so NaN fails range checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod control;
pub mod dqn;
pub mod error;
pub mod eval;
pub mod plant;
pub mod training;
pub mod transfer;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic generator for one purpose (`stream`) of a run seed.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
