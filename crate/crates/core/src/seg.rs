// SPDX-License-Identifier: Apache-2.0

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Integer class map of shape H×W with an optional ignore mask.
///
/// Ignored pixels always carry class 0 so that maps compare equal whenever
/// their visible content and ignore masks agree.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SegMap {
    height: usize,
    width: usize,
    num_classes: usize,
    classes: Vec<u8>,
    ignore: Option<Vec<bool>>,
}

impl SegMap {
    pub fn new(height: usize, width: usize, num_classes: usize, classes: Vec<u8>) -> Result<Self> {
        Self::with_ignore(height, width, num_classes, classes, None)
    }

    pub fn filled(height: usize, width: usize, num_classes: usize, class: u8) -> Result<Self> {
        Self::new(height, width, num_classes, vec![class; height * width])
    }

    pub fn with_ignore(
        height: usize,
        width: usize,
        num_classes: usize,
        mut classes: Vec<u8>,
        ignore: Option<Vec<bool>>,
    ) -> Result<Self> {
        if classes.len() != height * width {
            return Err(Error::shape(
                "SegMap",
                format!("{} class entries for {height}x{width}", classes.len()),
            ));
        }
        if num_classes == 0 || num_classes > 255 {
            return Err(Error::invalid("SegMap", format!("num_classes {num_classes}")));
        }
        let ignore = match ignore {
            Some(mask) if mask.len() != classes.len() => {
                return Err(Error::shape("SegMap", format!("ignore mask has {} entries", mask.len())))
            }
            Some(mask) if mask.iter().any(|&m| m) => Some(mask),
            _ => None,
        };
        for (i, c) in classes.iter_mut().enumerate() {
            if ignore.as_ref().is_some_and(|m| m[i]) {
                *c = 0;
            } else if *c as usize >= num_classes {
                return Err(Error::ClassOutOfRange { class: *c, num_classes });
            }
        }
        Ok(SegMap { height, width, num_classes, classes, ignore })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn ignore(&self) -> Option<&[bool]> {
        self.ignore.as_deref()
    }

    pub fn is_ignored(&self, i: usize) -> bool {
        self.ignore.as_ref().is_some_and(|m| m[i])
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.classes[row * self.width + col]
    }

    /// Number of non-ignored pixels labelled `class`.
    pub fn count(&self, class: u8) -> usize {
        (0..self.len()).filter(|&i| !self.is_ignored(i) && self.classes[i] == class).count()
    }

    /// Channels-first one-hot encoding; ignored pixels are all-zero.
    pub fn one_hot(&self) -> Vec<f64> {
        let hw = self.len();
        let mut out = vec![0.0; self.num_classes * hw];
        for (i, &c) in self.classes.iter().enumerate() {
            if !self.is_ignored(i) {
                out[c as usize * hw + i] = 1.0;
            }
        }
        out
    }

    /// Relabel every non-ignored pixel through `map`.
    pub fn relabel(&self, num_classes: usize, map: impl Fn(u8) -> u8) -> Result<SegMap> {
        let classes = self
            .classes
            .iter()
            .enumerate()
            .map(|(i, &c)| if self.is_ignored(i) { 0 } else { map(c) })
            .collect();
        SegMap::with_ignore(self.height, self.width, num_classes, classes, self.ignore.clone())
    }

    pub fn same_shape(&self, other: &SegMap) -> bool {
        self.height == other.height && self.width == other.width && self.num_classes == other.num_classes
    }
}
