// SPDX-License-Identifier: Apache-2.0

use alloc::format;
use alloc::vec::Vec;

use num_rational::Ratio;
use num_traits::{CheckedAdd, CheckedMul, One, Zero};

use crate::error::{Error, Result};
use crate::seg::SegMap;

pub type Prob = Ratio<i128>;

pub const MAX_PAIRS: usize = 16;

/// A base class that is relabeled as `flipped` with probability `prob`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlipPair {
    pub base: u8,
    pub flipped: u8,
    pub prob: Prob,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlipSpec {
    pairs: Vec<FlipPair>,
}

impl FlipSpec {
    pub fn new(pairs: Vec<FlipPair>) -> Result<FlipSpec> {
        let mut seen = [false; 256];
        for p in &pairs {
            if !(p.prob > Prob::zero() && p.prob < Prob::one()) {
                return Err(Error::invalid("FlipSpec", format!("probability {} outside (0, 1)", p.prob)));
            }
            for id in [p.base, p.flipped] {
                if core::mem::replace(&mut seen[id as usize], true) {
                    return Err(Error::invalid("FlipSpec", format!("class id {id} used twice")));
                }
            }
        }
        Ok(FlipSpec { pairs })
    }

    /// Base classes `1..=k`, flipped classes `k+1..=2k`, class 0 is
    /// background.
    pub fn consecutive(probs: &[Prob]) -> Result<FlipSpec> {
        let k = probs.len();
        if 2 * k + 1 > 255 {
            return Err(Error::invalid("FlipSpec", format!("{k} pairs do not fit in byte class ids")));
        }
        Self::new(
            probs
                .iter()
                .enumerate()
                .map(|(i, &prob)| FlipPair { base: i as u8 + 1, flipped: (k + i) as u8 + 1, prob })
                .collect(),
        )
    }

    /// Five pairs with probabilities 8/17 down to 4/17.
    pub fn five_pair() -> FlipSpec {
        Self::consecutive(&[8, 7, 6, 5, 4].map(|n| Prob::new(n, 17))).expect("valid")
    }

    /// Three pairs with probabilities 8/17, 7/17, 6/17.
    pub fn three_pair() -> FlipSpec {
        Self::consecutive(&[8, 7, 6].map(|n| Prob::new(n, 17))).expect("valid")
    }

    pub fn pairs(&self) -> &[FlipPair] {
        &self.pairs
    }

    pub fn k(&self) -> usize {
        self.pairs.len()
    }

    /// Smallest class count that holds background and every id.
    pub fn num_classes(&self) -> usize {
        self.pairs.iter().map(|p| p.base.max(p.flipped) as usize + 1).max().unwrap_or(1)
    }

    pub fn flip_pairs(&self) -> Vec<(u8, u8)> {
        self.pairs.iter().map(|p| (p.base, p.flipped)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mode {
    /// Bit `i` set means pair `i` is flipped.
    pub pattern: u32,
    pub prob: Prob,
    pub weight: f64,
}

/// All `2^k` flip patterns with their exact probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeTable {
    k: usize,
    modes: Vec<Mode>,
}

impl ModeTable {
    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn weights(&self) -> Vec<f64> {
        self.modes.iter().map(|m| m.weight).collect()
    }

    /// Exact sum of the mode probabilities.
    pub fn total(&self) -> Result<Prob> {
        self.modes.iter().try_fold(Prob::zero(), |acc, m| {
            acc.checked_add(&m.prob).ok_or_else(|| Error::invalid("ModeTable", "rational overflow"))
        })
    }

    /// Table with a single certain mode.
    pub fn certain(pattern: u32, k: usize) -> ModeTable {
        ModeTable { k, modes: alloc::vec![Mode { pattern, prob: Prob::one(), weight: 1.0 }] }
    }
}

pub fn to_f64(p: &Prob) -> f64 {
    *p.numer() as f64 / *p.denom() as f64
}

pub fn enumerate_modes(spec: &FlipSpec) -> Result<ModeTable> {
    let k = spec.k();
    if k > MAX_PAIRS {
        return Err(Error::invalid("enumerate_modes", format!("{k} pairs exceed the limit of {MAX_PAIRS}")));
    }
    let overflow = || Error::invalid("enumerate_modes", "rational overflow");
    let mut modes = Vec::with_capacity(1 << k);
    for pattern in 0u32..(1 << k) {
        let mut prob = Prob::one();
        for (i, pair) in spec.pairs().iter().enumerate() {
            let f = if pattern >> i & 1 == 1 { pair.prob } else { Prob::one() - pair.prob };
            prob = prob.checked_mul(&f).ok_or_else(overflow)?;
        }
        modes.push(Mode { pattern, weight: to_f64(&prob), prob });
    }
    Ok(ModeTable { k, modes })
}

/// Relabel every pixel of each flipped pair's base class.
pub fn apply_mode(base: &SegMap, pattern: u32, spec: &FlipSpec) -> Result<SegMap> {
    let mut lut: [u8; 256] = core::array::from_fn(|i| i as u8);
    for (i, pair) in spec.pairs().iter().enumerate() {
        if pattern >> i & 1 == 1 {
            lut[pair.base as usize] = pair.flipped;
        }
    }
    base.relabel(base.num_classes().max(spec.num_classes()), |c| lut[c as usize])
}
