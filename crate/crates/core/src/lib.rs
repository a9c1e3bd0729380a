//! Task-aware plugin speech enhancement.
//!
//! A mask-based enhancer produces `ŝ` from a noisy input `x`; a scalar gate
//! `w` mixes the two as `(1 - w)·ŝ + w·x` before a downstream model consumes
//! the result. The gate is predicted from downstream metadata (task id and
//! whether the downstream model was trained with noise injection).

pub mod downstream;
pub mod enhancer;
pub mod error;
pub mod gate;
pub mod losses;
pub mod nn;
pub mod predictor;
pub mod rng;
pub mod signal;

pub use error::{Error, Result};
