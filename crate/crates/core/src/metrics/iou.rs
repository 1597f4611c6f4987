// SPDX-License-Identifier: Apache-2.0

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::seg::SegMap;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum IoUMode {
    /// IoU of one foreground class; two empty maps are at distance 0.
    BinaryEmptyZero { foreground: u8 },
    /// Mean per-class IoU over the evaluation classes present in either map.
    SwitchableClassAverage,
}

/// How `1 − IoU` is computed. Ignored pixels of either map count towards
/// neither intersection nor union.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IoUConvention {
    pub mode: IoUMode,
    pub eval_classes: Vec<u8>,
}

impl IoUConvention {
    pub fn binary() -> Self {
        IoUConvention { mode: IoUMode::BinaryEmptyZero { foreground: 1 }, eval_classes: Vec::new() }
    }

    pub fn switchable(eval_classes: Vec<u8>) -> Result<Self> {
        if eval_classes.is_empty() {
            return Err(Error::invalid("IoUConvention", "switchable mode needs evaluation classes"));
        }
        Ok(IoUConvention { mode: IoUMode::SwitchableClassAverage, eval_classes })
    }
}

/// `1 − IoU(a, b)` under `conv`, in `[0, 1]`.
pub fn dist(a: &SegMap, b: &SegMap, conv: &IoUConvention) -> Result<f64> {
    if !a.same_shape(b) || a.num_classes() != b.num_classes() {
        return Err(Error::shape(
            "dist",
            format!("{}x{}/{} vs {}x{}/{}", a.height(), a.width(), a.num_classes(), b.height(), b.width(), b.num_classes()),
        ));
    }
    let valid = |i: usize| !a.is_ignored(i) && !b.is_ignored(i);
    match conv.mode {
        IoUMode::BinaryEmptyZero { foreground } => {
            let (mut inter, mut union) = (0usize, 0usize);
            for (i, (&x, &y)) in a.classes().iter().zip(b.classes()).enumerate() {
                if valid(i) {
                    let (x, y) = (x == foreground, y == foreground);
                    inter += (x && y) as usize;
                    union += (x || y) as usize;
                }
            }
            Ok(if union == 0 { 0.0 } else { 1.0 - inter as f64 / union as f64 })
        }
        IoUMode::SwitchableClassAverage => {
            if conv.eval_classes.is_empty() {
                return Err(Error::invalid("dist", "no evaluation classes"));
            }
            let mut inter = [0usize; 256];
            let mut union = [0usize; 256];
            for (i, (&x, &y)) in a.classes().iter().zip(b.classes()).enumerate() {
                if valid(i) {
                    union[x as usize] += 1;
                    if x == y {
                        inter[x as usize] += 1;
                    } else {
                        union[y as usize] += 1;
                    }
                }
            }
            let (mut total, mut counted) = (0.0, 0usize);
            for &c in &conv.eval_classes {
                let u = union[c as usize];
                if u > 0 {
                    total += inter[c as usize] as f64 / u as f64;
                    counted += 1;
                }
            }
            Ok(if counted == 0 { 0.0 } else { 1.0 - total / counted as f64 })
        }
    }
}
