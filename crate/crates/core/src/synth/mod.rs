// SPDX-License-Identifier: Apache-2.0

//! Synthetic tasks with known label distributions.

mod lidc;
mod modes;
mod scene;

pub use lidc::{toy_lidc_example, GraderSet, ToyLidcConfig, GRADERS};
pub use modes::{apply_mode, enumerate_modes, to_f64, FlipPair, FlipSpec, Mode, ModeTable, Prob, MAX_PAIRS};
pub use scene::{render_scene, sample_training_pair, AmbiguousExample, SceneConfig};

use crate::rng::{mix64, RngStream};

const SCENE_STREAM: u64 = 0x73_6365_6e65;
const LIDC_STREAM: u64 = 0x6c69_6463;

/// Stream for the scene with `id`; independent of every other id.
pub fn scene_rng(seed: u64, id: u64) -> RngStream {
    RngStream::new(seed, mix64(SCENE_STREAM ^ mix64(id)))
}

pub fn lidc_rng(seed: u64, id: u64) -> RngStream {
    RngStream::new(seed, mix64(LIDC_STREAM ^ mix64(id)))
}
