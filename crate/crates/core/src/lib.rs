//! Uncertainty quantification for regression under distribution shift.
//!
//! The crate covers the full pipeline at desk scale:
//!
//! - [`data`]: JSONL corpora, subject-disjoint splits, synthetic
//!   heteroscedastic generation;
//! - [`autodiff`]: a minimal tape-based reverse-mode engine;
//! - [`backbone`]: the 1-D residual network with block-level dropout and
//!   point or Gaussian heads;
//! - [`train`]: GNLL/MSE losses, AdamW with gradient accumulation,
//!   best-validation checkpointing, multi-seed and ensemble drivers;
//! - [`uq`]: MC-dropout and deep-ensemble predictive distributions and
//!   prediction intervals;
//! - [`recalib`]: conformal prediction, temperature scaling, isotonic
//!   regression;
//! - [`metrics`]: MAE, interval (Winkler) scores, 1-D Wasserstein shift
//!   quantification, bootstrap CIs, and the tiered method comparison.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod recalib;
pub mod rng;
pub mod train;
pub mod uq;

pub use error::{Error, Result};
