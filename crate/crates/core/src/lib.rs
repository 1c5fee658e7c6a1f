//! Utility-maximizing learning to rank.
//!
//! The crate covers the whole loop: an oracle click model with item-specific
//! position bias, a learned position-aware CTR model, an unbiased estimator
//! of list utility from logged clicks, the exact item/position matching that
//! maximizes utility, and a pairwise scorer trained to approximate that
//! matching in O(N) at inference time.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod click;
pub mod ctr;
pub mod data;
pub mod error;
pub mod eval;
pub mod io;
pub mod matching;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod ranker;
pub mod seed;

pub use error::{Error, Result};
