//! BCE-based tripartite synergistic learning (BCE3S) for long-tailed recognition.
//!
//! The crate is organised around the three learning modes and the machinery
//! needed to train and inspect them on synthetic long-tailed data:
//!
//! * [`losses`]: joint (sample-to-class), contrastive (sample-to-sample) and
//!   uniform (class-to-class) losses in both the sigmoid/BCE and softmax/CE
//!   families, plus class-balanced re-weighting.
//! * [`grads`]: analytic gradients of every loss component and a central
//!   finite-difference checker that arbitrates them.
//! * [`geometry`]: compactness and separability metrics, the classifier
//!   separability matrix and simplex-ETF diagnostics.
//! * [`data`]: long-tailed Gaussian-mixture datasets, batching, the per-class
//!   memory bank and Many/Medium/Few bookkeeping.
//! * [`train`]: a small MLP model, SGD with momentum, the cosine schedule and
//!   the two-stage training pipeline.
//! * [`cli`]: the experiment runner behind the `bce3s` binary.

pub mod cli;
pub mod config;
pub mod data;
pub mod dump;
pub mod error;
pub mod geometry;
pub mod grads;
pub mod losses;
pub mod rng;
pub mod train;
pub mod vecops;

pub use error::{Error, Result};
