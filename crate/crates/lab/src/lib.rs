// SPDX-License-Identifier: Apache-2.0

//! Datasets, training runs, evaluation and reports on top of `probseg-core`.

// NaN-rejecting range checks are written as negated comparisons on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod formats;
pub mod hash;
pub mod svg;

pub use config::ExperimentConfig;
pub use error::{LabError, Result};
