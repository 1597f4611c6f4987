// SPDX-License-Identifier: Apache-2.0

//! Reverse-mode differentiation over channels-first image tensors.
//!
//! A [`Tape`] records every operation of a forward computation together with
//! whatever the backward sweep needs. Trainable weights live in a
//! [`ParamStore`]; a tape copies them in as leaves and hands the gradients
//! back after [`Tape::backward`].

mod gradcheck;
mod kernels;
mod params;
mod tape;

pub use gradcheck::{analytic_gradients, grad_check, numeric_gradient, relative_error, GradCheck, GradCheckReport};
pub use kernels::Resize;
pub use params::{AdamConfig, Param, ParamGroup, ParamId, ParamStore};
pub use tape::{DiffTensor, Tape, TensorId};
