// SPDX-License-Identifier: Apache-2.0

//! U-Net core, density nets, output heads and the baseline variants.

mod arch;
mod init;
mod latent;
mod model;

pub use arch::{ArchConfig, Variant};
pub use init::{orthogonal, truncated_normal};
pub use latent::{sample_latent, GaussianNodes, GaussianParams, LatentSample, LatentSource, LOG_SIGMA_CLAMP};
pub use model::{argmax, DensityNet, LatentGrid, Model, Network};
