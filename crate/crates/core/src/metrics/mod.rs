// SPDX-License-Identifier: Apache-2.0

//! Distances between segmentations and the statistics built on them.

mod ambiguity;
mod calib;
mod ged;
mod iou;
mod wilcoxon;

pub use ambiguity::{
    ambiguity_accuracy, ambiguity_threshold, majority_rate, presence_count, presence_histogram, Direction, PresenceHistogram,
    ThresholdRule,
};
pub use calib::{closest_mode, closest_mode_frequencies, pixel_marginals};
pub use ged::{distance_matrix, ged_mixture, ged_sampled, GedReport};
pub use iou::{dist, IoUConvention, IoUMode};
pub use wilcoxon::{midranks, wilcoxon_signed_rank, Wilcoxon, EXACT_MAX_N, MIN_PAIRS};
