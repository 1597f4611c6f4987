// SPDX-License-Identifier: Apache-2.0

use alloc::format;
use alloc::vec;

use super::modes::{apply_mode, FlipSpec, ModeTable};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::RngStream;
use crate::seg::SegMap;

/// Street-scene stand-in: a background with one shape per base class.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub spec: FlipSpec,
    pub noise_sigma: f64,
    /// Smallest fraction of pixels each base class must cover.
    pub min_coverage: f64,
    pub max_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 16,
            width: 32,
            spec: FlipSpec::three_pair(),
            noise_sigma: 0.05,
            min_coverage: 0.02,
            max_attempts: 200,
        }
    }
}

impl SceneConfig {
    /// Mean intensity of base pair `i`; background is 0.
    pub fn intensity(&self, pair: usize) -> f64 {
        (pair + 1) as f64 / self.spec.k() as f64
    }
}

/// One rendered scene before any flipping.
#[derive(Clone, Debug, PartialEq)]
pub struct AmbiguousExample {
    pub id: u64,
    pub image: Image,
    pub base_labels: SegMap,
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Band { top: usize, rows: usize },
    Rect { top: usize, left: usize, rows: usize, cols: usize },
    Disc { cy: f64, cx: f64, r: f64 },
}

impl Shape {
    fn draw(h: usize, w: usize, rng: &mut RngStream) -> Shape {
        let span = |n: usize, lo: f64, hi: f64, rng: &mut RngStream| -> usize {
            let a = libm::ceil(lo * n as f64) as usize;
            let b = ((hi * n as f64) as usize).max(a);
            a + rng.below((b - a + 1) as u64) as usize
        };
        match rng.below(3) {
            0 => {
                let rows = span(h, 0.15, 0.35, rng).max(1);
                Shape::Band { top: rng.below((h - rows + 1) as u64) as usize, rows }
            }
            1 => {
                let rows = span(h, 0.25, 0.6, rng).max(1);
                let cols = span(w, 0.15, 0.4, rng).max(1);
                Shape::Rect {
                    top: rng.below((h - rows + 1) as u64) as usize,
                    left: rng.below((w - cols + 1) as u64) as usize,
                    rows,
                    cols,
                }
            }
            _ => {
                let m = h.min(w) as f64;
                let r = m * (0.15 + 0.15 * rng.uniform());
                Shape::Disc { cy: r + rng.uniform() * (h as f64 - 2.0 * r), cx: r + rng.uniform() * (w as f64 - 2.0 * r), r }
            }
        }
    }

    fn contains(&self, y: usize, x: usize) -> bool {
        match *self {
            Shape::Band { top, rows } => y >= top && y < top + rows,
            Shape::Rect { top, left, rows, cols } => y >= top && y < top + rows && x >= left && x < left + cols,
            Shape::Disc { cy, cx, r } => {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                dy * dy + dx * dx <= r * r
            }
        }
    }
}

/// Paint one shape per base class over background and add Gaussian noise.
/// Layouts are redrawn until every base class is visible enough.
pub fn render_scene(cfg: &SceneConfig, id: u64, rng: &mut RngStream) -> Result<AmbiguousExample> {
    let (h, w) = (cfg.height, cfg.width);
    let k = cfg.spec.k();
    let hw = h * w;
    let need = libm::ceil(cfg.min_coverage * hw as f64) as usize;
    if h == 0 || w == 0 || k == 0 || need.max(1) * k > hw {
        return Err(Error::invalid("render_scene", format!("{k} classes cannot each cover {need} of {hw} pixels")));
    }
    let num_classes = cfg.spec.num_classes();
    for _ in 0..cfg.max_attempts {
        let mut labels = vec![0u8; hw];
        for pair in cfg.spec.pairs() {
            let shape = Shape::draw(h, w, rng);
            for y in 0..h {
                for x in 0..w {
                    if shape.contains(y, x) {
                        labels[y * w + x] = pair.base;
                    }
                }
            }
        }
        if cfg.spec.pairs().iter().any(|p| labels.iter().filter(|&&c| c == p.base).count() < need.max(1)) {
            continue;
        }
        let mut level = [0.0f64; 256];
        for (i, pair) in cfg.spec.pairs().iter().enumerate() {
            level[pair.base as usize] = cfg.intensity(i);
        }
        let data = labels.iter().map(|&c| level[c as usize] + cfg.noise_sigma * rng.normal()).collect();
        return Ok(AmbiguousExample {
            id,
            image: Image::new(1, h, w, data)?,
            base_labels: SegMap::new(h, w, num_classes, labels)?,
        });
    }
    Err(Error::Degenerate(format!("no valid layout after {} attempts", cfg.max_attempts)))
}

/// Draw a mode by its probability and return the image with that labeling.
pub fn sample_training_pair(
    example: &AmbiguousExample,
    table: &ModeTable,
    spec: &FlipSpec,
    rng: &mut RngStream,
) -> Result<(Image, SegMap)> {
    let j = rng.categorical(&table.weights());
    let y = apply_mode(&example.base_labels, table.modes()[j].pattern, spec)?;
    Ok((example.image.clone(), y))
}
