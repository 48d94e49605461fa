//! Bayesian (MAP) adaptation of feedforward classifiers through augmented
//! linear transforms.
//!
//! The crate covers the whole pipeline at desk scale:
//!
//! - [`net`]: sigmoid/softmax feedforward networks, cross-entropy,
//!   masked backpropagation and mini-batch SGD with pluggable objectives.
//! - [`adapt`]: identity-initialised LIN/LHN layers, direct output-layer
//!   (LON) adaptation, and collapsing an adapter back into the network.
//! - [`prior`]: empirical-Bayes diagonal Gaussian priors over adapter
//!   weights, MAP adaptation, and the KLD target-interpolation baseline.
//! - [`hier`]: a fixed two-level tree prior over output rows with its
//!   closed-form parent update.
//! - [`sim`]: a deterministic synthetic corpus with shifted "speakers".
//! - [`harness`]: experiment plans, result tables, reports, and bundles.

// `!(x > 0.0)` style checks also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapt;
pub mod error;
pub mod harness;
pub mod hier;
pub mod linalg;
pub mod net;
pub mod persist;
pub mod prior;
pub mod seeds;
pub mod sim;

pub use error::{Error, Result};
