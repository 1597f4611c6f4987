// SPDX-License-Identifier: Apache-2.0

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Largest number of non-zero pairs evaluated by full enumeration.
pub const EXACT_MAX_N: usize = 12;
pub const MIN_PAIRS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Wilcoxon {
    /// Sum of ranks of positive differences `a − b`.
    pub w: f64,
    /// Pairs left after dropping zero differences.
    pub n: usize,
    /// One-sided `P(W ≥ w)` under the null; small when `a` tends to exceed `b`.
    pub p: f64,
    /// `P(W = w)`, exact method only.
    pub p_point: Option<f64>,
    pub exact: bool,
}

/// Midranks (1-based) of `values`, with tie-group sizes.
pub fn midranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        ties.push(j - i);
        i = j;
    }
    (ranks, ties)
}

/// Wilcoxon signed-rank test of paired samples, one-sided for `a > b`.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<Wilcoxon> {
    if a.len() != b.len() {
        return Err(Error::shape("wilcoxon_signed_rank", format!("{} vs {} values", a.len(), b.len())));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    if d.is_empty() {
        return Err(Error::Degenerate("all paired differences are zero".into()));
    }
    let n = d.len();
    if n < MIN_PAIRS {
        return Err(Error::invalid("wilcoxon_signed_rank", format!("{n} non-zero differences, need {MIN_PAIRS}")));
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let (ranks, ties) = midranks(&abs);
    let w: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    if n <= EXACT_MAX_N {
        // doubled ranks are integers, so comparisons are exact
        let twice: Vec<u64> = ranks.iter().map(|r| libm::round(2.0 * r) as u64).collect();
        let target = libm::round(2.0 * w) as u64;
        let (mut ge, mut eq) = (0u64, 0u64);
        for pattern in 0u32..(1 << n) {
            let s: u64 = (0..n).filter(|i| pattern >> i & 1 == 1).map(|i| twice[i]).sum();
            ge += (s >= target) as u64;
            eq += (s == target) as u64;
        }
        let total = (1u64 << n) as f64;
        return Ok(Wilcoxon { w, n, p: ge as f64 / total, p_point: Some(eq as f64 / total), exact: true });
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
    let z = (w - mean - 0.5) / libm::sqrt(var);
    Ok(Wilcoxon { w, n, p: 0.5 * libm::erfc(z / core::f64::consts::SQRT_2), p_point: None, exact: false })
}
