//! Multiple-instance residual networks with adjust pooling for keypoint
//! heatmap regression on synthetic stick-figure images, trained with a
//! balance-regulated adversarial objective.
//!
//! The crate is organized bottom-up:
//!
//! - [`kernel`]: dense matrices, softmax, and finite-difference checking
//! - [`pooling`]: instance bags, squash, and the iterative adjust pooling
//! - [`net`]: the multi-level residual network over instance bags
//! - [`loss`]: margin/bag losses and the adversarial balance terms
//! - [`pose`]: synthetic pose data, heatmaps, and the text dataset format
//! - [`train`]: optimizer, training loop, and binary checkpoints
//! - [`metrics`]: PCK/PCKh evaluation and confusion matrices
//!
//! Everything is `f64`, single-threaded, and deterministic for a given seed.

pub mod error;
pub mod kernel;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod pooling;
pub mod pose;
pub mod train;

pub use error::{AmilError, Result};
