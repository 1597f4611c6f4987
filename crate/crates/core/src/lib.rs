// SPDX-License-Identifier: Apache-2.0

//! Learning and evaluating distributions over segmentations.
//!
//! The crate is `no_std` (with `alloc`) and carries every numerical piece:
//!
//! - [`diff`]: a small reverse-mode differentiation tape with the image
//!   primitives needed by U-Net style models, parameter storage and Adam.
//! - [`nets`]: the probabilistic U-Net, its baselines and ablations.
//! - [`objectives`]: ELBO, closed-form diagonal Gaussian KL, the M-heads
//!   oracle loss and a training step.
//! - [`metrics`]: IoU distances, generalized energy distance estimators,
//!   calibration statistics, ambiguity detection and the Wilcoxon test.
//! - [`synth`]: synthetic datasets whose output distributions are known.
//!
//! IO, file formats and the command line live in the `probseg` crate.

#![no_std]
// NaN-rejecting range checks are written as negated comparisons on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod diff;
pub mod error;
pub mod image;
pub mod metrics;
pub mod nets;
pub mod objectives;
pub mod rng;
pub mod seg;
pub mod synth;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use image::Image;
pub use seg::SegMap;
