// SPDX-License-Identifier: Apache-2.0

use alloc::format;
use alloc::vec::Vec;

use super::iou::{dist, IoUConvention};
use crate::error::{Error, Result};
use crate::seg::SegMap;

/// Terms of the squared generalized energy distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GedReport {
    /// Mean distance between predictions and ground truth.
    pub cross: f64,
    /// Mean distance between pairs of predictions, self-pairs included.
    pub pred_div: f64,
    /// Mean distance between pairs of ground truths, self-pairs included.
    pub gt_div: f64,
    /// `2·cross − pred_div − gt_div`; not clipped at zero.
    pub d2: f64,
    pub n: usize,
    pub m: usize,
}

impl GedReport {
    fn new(cross: f64, pred_div: f64, gt_div: f64, n: usize, m: usize) -> Self {
        GedReport { cross, pred_div, gt_div, d2: 2.0 * cross - pred_div - gt_div, n, m }
    }
}

/// Mean over all ordered pairs of `xs`, including `i = j`, weighted by
/// `w_i w_j` when weights are given.
fn self_term(xs: &[SegMap], weights: Option<&[f64]>, conv: &IoUConvention) -> Result<f64> {
    let n = xs.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let d = dist(&xs[i], &xs[j], conv)?;
            total += 2.0 * d * weights.map_or(1.0, |w| w[i] * w[j]);
        }
    }
    Ok(match weights {
        Some(_) => total,
        None => total / (n * n) as f64,
    })
}

fn nonempty(op: &'static str, s: &[SegMap], y: &[SegMap]) -> Result<()> {
    if s.is_empty() || y.is_empty() {
        return Err(Error::invalid(op, format!("need samples on both sides, got {} and {}", s.len(), y.len())));
    }
    Ok(())
}

/// Sample estimator against `m` equally weighted ground truths.
pub fn ged_sampled(s: &[SegMap], y: &[SegMap], conv: &IoUConvention) -> Result<GedReport> {
    nonempty("ged_sampled", s, y)?;
    let mut cross = 0.0;
    for a in s {
        for b in y {
            cross += dist(a, b, conv)?;
        }
    }
    let (n, m) = (s.len(), y.len());
    Ok(GedReport::new(cross / (n * m) as f64, self_term(s, None, conv)?, self_term(y, None, conv)?, n, m))
}

/// Estimator against a weighted mixture of ground-truth modes; the
/// ground-truth term is the exact weighted double sum.
pub fn ged_mixture(s: &[SegMap], modes: &[SegMap], weights: &[f64], conv: &IoUConvention) -> Result<GedReport> {
    nonempty("ged_mixture", s, modes)?;
    if weights.len() != modes.len() {
        return Err(Error::shape("ged_mixture", format!("{} weights for {} modes", weights.len(), modes.len())));
    }
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("ged_mixture", format!("weights must be non-negative and sum to 1, sum is {total}")));
    }
    let mut cross = 0.0;
    for a in s {
        for (b, w) in modes.iter().zip(weights) {
            cross += dist(a, b, conv)? * w;
        }
    }
    let n = s.len();
    Ok(GedReport::new(cross / n as f64, self_term(s, None, conv)?, self_term(modes, Some(weights), conv)?, n, modes.len()))
}

/// Pairwise distance matrix, row-major.
pub fn distance_matrix(a: &[SegMap], b: &[SegMap], conv: &IoUConvention) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for x in a {
        for y in b {
            out.push(dist(x, y, conv)?);
        }
    }
    Ok(out)
}
