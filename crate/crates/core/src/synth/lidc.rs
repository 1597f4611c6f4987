// SPDX-License-Identifier: Apache-2.0

use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;
use crate::image::Image;
use crate::rng::RngStream;
use crate::seg::SegMap;

pub const GRADERS: usize = 4;

/// Knots of the per-grader radial boundary perturbation.
const JITTER_KNOTS: usize = 8;

/// Toy lesion task with four graders.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyLidcConfig {
    pub height: usize,
    pub width: usize,
    /// Probability that an instance is ambiguous.
    pub q: f64,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Standard deviation of the radial boundary jitter, in pixels.
    pub jitter: f64,
    pub noise_sigma: f64,
    /// Lesion intensity when all graders agree on presence.
    pub contrast: f64,
    /// Lesion intensity when they do not.
    pub faint_contrast: f64,
}

impl Default for ToyLidcConfig {
    fn default() -> Self {
        ToyLidcConfig {
            height: 16,
            width: 16,
            q: 0.5,
            radius_min: 2.0,
            radius_max: 4.0,
            jitter: 1.0,
            noise_sigma: 0.05,
            contrast: 1.0,
            faint_contrast: 0.4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraderSet {
    pub id: u64,
    pub image: Image,
    pub masks: Vec<SegMap>,
    pub ambiguous: bool,
}

impl GraderSet {
    /// True when the graders disagree on whether a lesion is present.
    pub fn presence_disagrees(&self) -> bool {
        let present = self.masks.iter().filter(|m| m.count(1) > 0).count();
        present != 0 && present != self.masks.len()
    }
}

fn lesion_mask(cfg: &ToyLidcConfig, cy: f64, cx: f64, radius: f64, rng: &mut RngStream) -> Result<SegMap> {
    let knots: Vec<f64> = (0..JITTER_KNOTS).map(|_| cfg.jitter * rng.normal()).collect();
    let mut classes = vec![0u8; cfg.height * cfg.width];
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            let turn = libm::atan2(dy, dx) / core::f64::consts::TAU;
            let t = (turn - libm::floor(turn)) * JITTER_KNOTS as f64;
            let i = (t as usize).min(JITTER_KNOTS - 1);
            let f = t - i as f64;
            let r = (radius + (1.0 - f) * knots[i] + f * knots[(i + 1) % JITTER_KNOTS]).max(0.5);
            if dy * dy + dx * dx <= r * r {
                classes[y * cfg.width + x] = 1;
            }
        }
    }
    SegMap::new(cfg.height, cfg.width, 2, classes)
}

/// One disc-like lesion annotated by four graders. Ambiguous instances have
/// some but not all graders marking nothing, and a fainter lesion.
pub fn toy_lidc_example(cfg: &ToyLidcConfig, id: u64, rng: &mut RngStream) -> Result<GraderSet> {
    let ambiguous = rng.bernoulli(cfg.q);
    let radius = cfg.radius_min + (cfg.radius_max - cfg.radius_min) * rng.uniform();
    let margin = |n: usize| (radius + 1.0).min(n as f64 / 2.0);
    let (my, mx) = (margin(cfg.height), margin(cfg.width));
    let cy = my + rng.uniform() * (cfg.height as f64 - 2.0 * my);
    let cx = mx + rng.uniform() * (cfg.width as f64 - 2.0 * mx);
    let empty: [bool; GRADERS] = if ambiguous {
        loop {
            let e = [(); GRADERS].map(|_| rng.bernoulli(0.5));
            if e.iter().any(|&v| v) && !e.iter().all(|&v| v) {
                break e;
            }
        }
    } else {
        [false; GRADERS]
    };
    let mut masks = Vec::with_capacity(GRADERS);
    for &e in &empty {
        masks.push(if e { SegMap::filled(cfg.height, cfg.width, 2, 0)? } else { lesion_mask(cfg, cy, cx, radius, rng)? });
    }
    let level = if ambiguous { cfg.faint_contrast } else { cfg.contrast };
    let mut data = Vec::with_capacity(cfg.height * cfg.width);
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            let base = if dy * dy + dx * dx <= radius * radius { level } else { 0.0 };
            data.push(base + cfg.noise_sigma * rng.normal());
        }
    }
    Ok(GraderSet { id, image: Image::new(1, cfg.height, cfg.width, data)?, masks, ambiguous })
}
