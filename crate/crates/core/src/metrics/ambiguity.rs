// SPDX-License-Identifier: Apache-2.0

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::seg::SegMap;

/// Number of samples with at least one foreground (non-zero) pixel.
pub fn presence_count(samples: &[SegMap]) -> usize {
    samples.iter().filter(|s| s.classes().iter().enumerate().any(|(i, &c)| c != 0 && !s.is_ignored(i))).count()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PresenceHistogram {
    /// Presence count per instance.
    pub counts: Vec<usize>,
    /// `ambiguous[c]` instances labeled ambiguous had count `c`.
    pub ambiguous: Vec<usize>,
    pub unambiguous: Vec<usize>,
}

/// Presence counts per instance and their histograms split by label.
pub fn presence_histogram(instances: &[(&[SegMap], bool)]) -> PresenceHistogram {
    let bins = instances.iter().map(|(s, _)| s.len()).max().unwrap_or(0) + 1;
    let mut h = PresenceHistogram { counts: Vec::new(), ambiguous: vec![0; bins], unambiguous: vec![0; bins] };
    for (samples, ambiguous) in instances {
        let c = presence_count(samples);
        h.counts.push(c);
        if *ambiguous {
            h.ambiguous[c] += 1;
        } else {
            h.unambiguous[c] += 1;
        }
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Ambiguous iff count < t.
    Below,
    /// Ambiguous iff count > t.
    Above,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdRule {
    pub t: usize,
    pub direction: Direction,
    /// Accuracy on the data the rule was fitted to.
    pub accuracy: f64,
    /// The fitting data held a single label.
    pub degenerate: bool,
}

impl ThresholdRule {
    pub fn predicts_ambiguous(&self, count: usize) -> bool {
        match self.direction {
            Direction::Below => count < self.t,
            Direction::Above => count > self.t,
        }
    }
}

fn accuracy(rule: &ThresholdRule, data: &[(usize, bool)]) -> f64 {
    let correct = data.iter().filter(|(c, a)| rule.predicts_ambiguous(*c) == *a).count();
    correct as f64 / data.len() as f64
}

/// Best single-threshold rule over `t ∈ 0..=max_count` in both directions.
/// Ties prefer the smaller `t`, then [`Direction::Below`].
pub fn ambiguity_threshold(data: &[(usize, bool)], max_count: usize) -> Result<ThresholdRule> {
    if data.is_empty() {
        return Err(Error::invalid("ambiguity_threshold", "no validation instances"));
    }
    let amb = data.iter().filter(|(_, a)| *a).count();
    let degenerate = amb == 0 || amb == data.len();
    let mut best: Option<ThresholdRule> = None;
    for t in 0..=max_count {
        for direction in [Direction::Below, Direction::Above] {
            let mut rule = ThresholdRule { t, direction, accuracy: 0.0, degenerate };
            rule.accuracy = accuracy(&rule, data);
            if best.is_none_or(|b| rule.accuracy > b.accuracy) {
                best = Some(rule);
            }
        }
    }
    Ok(best.expect("at least one candidate"))
}

pub fn ambiguity_accuracy(data: &[(usize, bool)], rule: &ThresholdRule) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("ambiguity_accuracy", "no test instances"));
    }
    Ok(accuracy(rule, data))
}

/// Accuracy of always predicting the more frequent label.
pub fn majority_rate(data: &[(usize, bool)]) -> f64 {
    let amb = data.iter().filter(|(_, a)| *a).count();
    amb.max(data.len() - amb) as f64 / data.len().max(1) as f64
}
