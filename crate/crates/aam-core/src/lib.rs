//! Preference-optimization core: Bradley-Terry reward modeling with
//! act-adaptive margins.
//!
//! The crate is `no_std` (with `alloc`) and carries no IO. It provides:
//!
//! - [`tape`]: minimal reverse-mode automatic differentiation over dense
//!   `f64` tensors, with a finite-difference gradient checker.
//! - [`model`]: a tiny causal transformer with a shared backbone feeding
//!   an LM head (token log-probabilities) and a scalar value head (reward).
//! - [`losses`]: the Bradley-Terry loss family — plain BT, margin BT, and
//!   the probability-ratio (PR) and loss-difference (LD) adaptive margins,
//!   plus the SFT regularizer.
//! - [`data`]: seeded synthetic preference corpora with a planted reward
//!   and controllable ambiguity / label noise.
//! - [`trainer`]: Adam optimization of the reward model under any margin
//!   mode, with deterministic, resumable state.
//! - [`eval`]: held-out pairwise accuracy and margin-calibration
//!   diagnostics.
//!
//! File formats, checkpoints, and the CLI live in the companion `aam-cli`
//! crate.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
