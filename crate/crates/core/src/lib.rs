//! Semi-supervised music emotion tagging.
//!
//! A dual-branch (log-Mel + HPCP) convolutional-recurrent tagger trained in
//! long or short input mode, a noisy-student self-training pipeline with
//! percentile-calibrated pseudo-labels, weighted logit ensembling, and a
//! multi-label metric suite.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod features;
pub mod ingest;
pub mod model;
pub mod pipeline;
pub mod registry;
pub mod rng;
pub mod selftrain;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
