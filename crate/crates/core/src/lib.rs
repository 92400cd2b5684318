//! Fairness-aware cross-domain classifier training.
//!
//! A shared encoder feeds an emotion head and, through a gradient-reversal
//! junction, an adversarial gender head. A cross-corpus contrastive term
//! pulls same-gender source/target embeddings together. The crate also
//! carries the group-fairness metrics, a reweighing baseline, a synthetic
//! biased-corpus generator and the experiment driver used by the CLI.

pub mod data;
pub mod error;
pub mod evalreport;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod numcore;
pub mod optim;
pub mod selftest;
pub mod train;
pub mod util;

pub use error::{Error, Result};
