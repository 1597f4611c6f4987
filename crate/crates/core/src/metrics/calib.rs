// SPDX-License-Identifier: Apache-2.0

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::iou::{dist, IoUConvention};
use crate::error::{Error, Result};
use crate::seg::SegMap;

/// Index of the nearest mode; ties go to the lowest index.
pub fn closest_mode(sample: &SegMap, modes: &[SegMap], conv: &IoUConvention) -> Result<usize> {
    if modes.is_empty() {
        return Err(Error::invalid("closest_mode", "no modes"));
    }
    let mut best = (0, dist(sample, &modes[0], conv)?);
    for (j, m) in modes.iter().enumerate().skip(1) {
        let d = dist(sample, m, conv)?;
        if d < best.1 {
            best = (j, d);
        }
    }
    Ok(best.0)
}

/// Fraction of all samples whose nearest mode is `j`. Each instance pairs
/// its samples with its own mode maps; every instance has the same number
/// of modes.
pub fn closest_mode_frequencies(instances: &[(&[SegMap], &[SegMap])], conv: &IoUConvention) -> Result<Vec<f64>> {
    let m = instances.first().map_or(0, |(_, modes)| modes.len());
    if m == 0 {
        return Err(Error::invalid("closest_mode_frequencies", "no modes"));
    }
    let mut counts = vec![0usize; m];
    let mut total = 0usize;
    for (samples, modes) in instances {
        if modes.len() != m {
            return Err(Error::shape("closest_mode_frequencies", format!("{} modes, expected {m}", modes.len())));
        }
        for s in samples.iter() {
            counts[closest_mode(s, modes, conv)?] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::invalid("closest_mode_frequencies", "no samples"));
    }
    Ok(counts.into_iter().map(|c| c as f64 / total as f64).collect())
}

/// For each `(base, flipped)` pair, the fraction of sampled pixels labeled
/// `flipped` among sampled pixels whose unflipped ground truth is `base`.
/// `None` when no ground-truth pixel has that base class.
pub fn pixel_marginals(instances: &[(&[SegMap], &SegMap)], pairs: &[(u8, u8)]) -> Result<Vec<Option<f64>>> {
    let mut hits = vec![0usize; pairs.len()];
    let mut totals = vec![0usize; pairs.len()];
    for (samples, base) in instances {
        for s in samples.iter() {
            if !s.same_shape(base) {
                return Err(Error::shape("pixel_marginals", "sample and ground truth differ in shape"));
            }
            for (i, (&gt, &pred)) in base.classes().iter().zip(s.classes()).enumerate() {
                if base.is_ignored(i) || s.is_ignored(i) {
                    continue;
                }
                for (k, &(b, f)) in pairs.iter().enumerate() {
                    if gt == b {
                        totals[k] += 1;
                        hits[k] += (pred == f) as usize;
                    }
                }
            }
        }
    }
    Ok(hits.iter().zip(&totals).map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64)).collect())
}
