// SPDX-License-Identifier: Apache-2.0

//! Dense kernels behind the tape operations. Layouts are channels-first and
//! row-major throughout.

use alloc::vec;
use alloc::vec::Vec;

#[inline]
pub(crate) fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// Dot product with four fixed accumulators; the summation order depends
/// only on the length, so results are reproducible.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
pub(crate) fn sum(a: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.chunks_exact(4);
    let rest = chunks.remainder();
    for x in chunks {
        acc[0] += x[0];
        acc[1] += x[1];
        acc[2] += x[2];
        acc[3] += x[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for x in rest {
        s += x;
    }
    s
}

/// Geometry of a stride-1, same-padded square convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvGeom {
    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    /// Rows of the unfolded input matrix.
    pub fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }
}

/// Unfold `x` (C_in×H×W) into a (C_in·k·k)×(H·W) matrix with zero padding.
pub(crate) fn im2col(x: &[f64], g: ConvGeom) -> Vec<f64> {
    let (h, w, k) = (g.h, g.w, g.k);
    let pad = (k - 1) / 2;
    let hw = g.hw();
    let mut cols = vec![0.0; g.patch() * hw];
    for ci in 0..g.c_in {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let (x_lo, x_hi) = valid_range(kx, pad, w);
                for y in 0..h {
                    let sy = y + ky;
                    if sy < pad || sy - pad >= h {
                        continue;
                    }
                    let sy = sy - pad;
                    if x_lo >= x_hi {
                        continue;
                    }
                    let d = &mut dst[y * w + x_lo..y * w + x_hi];
                    let s0 = sy * w + x_lo + kx - pad;
                    d.copy_from_slice(&plane[s0..s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
    cols
}

/// Output columns `x` for which `x + kx - pad` lies inside `[0, w)`.
#[inline]
fn valid_range(kx: usize, pad: usize, w: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx);
    let hi = (w + pad).saturating_sub(kx).min(w);
    (lo, hi)
}

/// Adjoint of [`im2col`]: scatter-add columns back onto the input grid.
pub(crate) fn col2im_add(cols: &[f64], g: ConvGeom, dx: &mut [f64]) {
    let (h, w, k) = (g.h, g.w, g.k);
    let pad = (k - 1) / 2;
    let hw = g.hw();
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let (x_lo, x_hi) = valid_range(kx, pad, w);
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y + ky;
                    if sy < pad || sy - pad >= h {
                        continue;
                    }
                    let sy = sy - pad;
                    let s = &src[y * w + x_lo..y * w + x_hi];
                    let d0 = sy * w + x_lo + kx - pad;
                    for (d, v) in plane[d0..d0 + (x_hi - x_lo)].iter_mut().zip(s) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// `out = W · cols + b`, with W of shape C_out×patch and cols patch×HW.
///
/// Output channels are processed four at a time so each unfolded row is
/// read once per block; every output still accumulates in patch order.
pub(crate) fn conv_forward(cols: &[f64], weight: &[f64], bias: &[f64], g: ConvGeom) -> Vec<f64> {
    let hw = g.hw();
    let patch = g.patch();
    let mut out = vec![0.0; g.c_out * hw];
    let mut blocks = out.chunks_exact_mut(4 * hw);
    let mut co = 0;
    for block in &mut blocks {
        let (o0, rest) = block.split_at_mut(hw);
        let (o1, rest) = rest.split_at_mut(hw);
        let (o2, o3) = rest.split_at_mut(hw);
        o0.fill(bias[co]);
        o1.fill(bias[co + 1]);
        o2.fill(bias[co + 2]);
        o3.fill(bias[co + 3]);
        for r in 0..patch {
            let c = &cols[r * hw..(r + 1) * hw];
            let w0 = weight[co * patch + r];
            let w1 = weight[(co + 1) * patch + r];
            let w2 = weight[(co + 2) * patch + r];
            let w3 = weight[(co + 3) * patch + r];
            for p in 0..hw {
                let v = c[p];
                o0[p] += w0 * v;
                o1[p] += w1 * v;
                o2[p] += w2 * v;
                o3[p] += w3 * v;
            }
        }
        co += 4;
    }
    for row in blocks.into_remainder().chunks_exact_mut(hw) {
        row.fill(bias[co]);
        let wrow = &weight[co * patch..(co + 1) * patch];
        for (r, &wv) in wrow.iter().enumerate() {
            axpy(row, wv, &cols[r * hw..(r + 1) * hw]);
        }
        co += 1;
    }
    out
}

/// Weight and bias gradients of [`conv_forward`].
pub(crate) fn conv_backward_params(cols: &[f64], dout: &[f64], g: ConvGeom) -> (Vec<f64>, Vec<f64>) {
    let hw = g.hw();
    let patch = g.patch();
    let mut dw = vec![0.0; g.c_out * patch];
    let mut db = vec![0.0; g.c_out];
    for co in 0..g.c_out {
        db[co] = sum(&dout[co * hw..(co + 1) * hw]);
    }
    let full = g.c_out / 4 * 4;
    for co in (0..full).step_by(4) {
        let d = [0, 1, 2, 3].map(|i| &dout[(co + i) * hw..(co + i + 1) * hw]);
        for r in 0..patch {
            let v = dot4(d, &cols[r * hw..(r + 1) * hw]);
            for i in 0..4 {
                dw[(co + i) * patch + r] = v[i];
            }
        }
    }
    for co in full..g.c_out {
        let drow = &dout[co * hw..(co + 1) * hw];
        for r in 0..patch {
            dw[co * patch + r] = dot(drow, &cols[r * hw..(r + 1) * hw]);
        }
    }
    (dw, db)
}

/// Four [`dot`] products against a shared right-hand side, each with the
/// same accumulation order as [`dot`].
#[inline]
fn dot4(a: [&[f64]; 4], b: &[f64]) -> [f64; 4] {
    let n = b.len() / 4 * 4;
    let (a0, a1, a2, a3) = (&a[0][..b.len()], &a[1][..b.len()], &a[2][..b.len()], &a[3][..b.len()]);
    let mut s0 = [0.0f64; 4];
    let mut s1 = [0.0f64; 4];
    let mut s2 = [0.0f64; 4];
    let mut s3 = [0.0f64; 4];
    for j in (0..n).step_by(4) {
        let y = &b[j..j + 4];
        let x0 = &a0[j..j + 4];
        let x1 = &a1[j..j + 4];
        let x2 = &a2[j..j + 4];
        let x3 = &a3[j..j + 4];
        for t in 0..4 {
            s0[t] += x0[t] * y[t];
            s1[t] += x1[t] * y[t];
            s2[t] += x2[t] * y[t];
            s3[t] += x3[t] * y[t];
        }
    }
    let fold = |s: [f64; 4], x: &[f64]| {
        let mut v = (s[0] + s[1]) + (s[2] + s[3]);
        for k in n..b.len() {
            v += x[k] * b[k];
        }
        v
    };
    [fold(s0, a0), fold(s1, a1), fold(s2, a2), fold(s3, a3)]
}

/// Gradient with respect to the unfolded input: `Wᵀ · dout`.
pub(crate) fn conv_backward_cols(weight: &[f64], dout: &[f64], g: ConvGeom) -> Vec<f64> {
    let hw = g.hw();
    let patch = g.patch();
    let mut dcols = vec![0.0; patch * hw];
    let full = g.c_out / 4 * 4;
    for (r, drow) in dcols.chunks_exact_mut(hw).enumerate() {
        for co in (0..full).step_by(4) {
            let w = [0, 1, 2, 3].map(|i| weight[(co + i) * patch + r]);
            let d0 = &dout[co * hw..(co + 1) * hw];
            let d1 = &dout[(co + 1) * hw..(co + 2) * hw];
            let d2 = &dout[(co + 2) * hw..(co + 3) * hw];
            let d3 = &dout[(co + 3) * hw..(co + 4) * hw];
            for p in 0..hw {
                drow[p] = drow[p] + w[0] * d0[p] + w[1] * d1[p] + w[2] * d2[p] + w[3] * d3[p];
            }
        }
        for co in full..g.c_out {
            axpy(drow, weight[co * patch + r], &dout[co * hw..(co + 1) * hw]);
        }
    }
    dcols
}

/// Power-of-two bilinear resampling factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resize {
    Up(usize),
    Down(usize),
}

/// Two-tap interpolation weights along one axis, align-corners-false:
/// output index `o` samples the input at `(o + 0.5) · in/out − 0.5`,
/// clamped to the valid range.
#[derive(Clone, Debug)]
pub(crate) struct AxisTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl AxisTaps {
    pub fn new(n_in: usize, n_out: usize) -> AxisTaps {
        let scale = n_in as f64 / n_out as f64;
        let mut taps = AxisTaps { lo: Vec::with_capacity(n_out), hi: Vec::with_capacity(n_out), frac: Vec::with_capacity(n_out) };
        for o in 0..n_out {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (libm::floor(s) as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            taps.lo.push(i0);
            taps.hi.push(i1);
            taps.frac.push(s - i0 as f64);
        }
        taps
    }
}

pub(crate) fn resize_forward(x: &[f64], c: usize, h: usize, w: usize, rows: &AxisTaps, cols: &AxisTaps) -> Vec<f64> {
    let (oh, ow) = (rows.lo.len(), cols.lo.len());
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for oy in 0..oh {
            let (r0, r1, fy) = (rows.lo[oy], rows.hi[oy], rows.frac[oy]);
            for ox in 0..ow {
                let (c0, c1, fx) = (cols.lo[ox], cols.hi[ox], cols.frac[ox]);
                let top = plane[r0 * w + c0] * (1.0 - fx) + plane[r0 * w + c1] * fx;
                let bottom = plane[r1 * w + c0] * (1.0 - fx) + plane[r1 * w + c1] * fx;
                dst[oy * ow + ox] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

pub(crate) fn resize_backward(dout: &[f64], c: usize, h: usize, w: usize, rows: &AxisTaps, cols: &AxisTaps) -> Vec<f64> {
    let (oh, ow) = (rows.lo.len(), cols.lo.len());
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        let src = &dout[ch * oh * ow..(ch + 1) * oh * ow];
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let (r0, r1, fy) = (rows.lo[oy], rows.hi[oy], rows.frac[oy]);
            for ox in 0..ow {
                let (c0, c1, fx) = (cols.lo[ox], cols.hi[ox], cols.frac[ox]);
                let g = src[oy * ow + ox];
                let gt = g * (1.0 - fy);
                let gb = g * fy;
                plane[r0 * w + c0] += gt * (1.0 - fx);
                plane[r0 * w + c1] += gt * fx;
                plane[r1 * w + c0] += gb * (1.0 - fx);
                plane[r1 * w + c1] += gb * fx;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as an independent reference.
    fn conv_naive(x: &[f64], wgt: &[f64], b: &[f64], g: ConvGeom) -> Vec<f64> {
        let pad = (g.k - 1) as isize / 2;
        let mut out = vec![0.0; g.c_out * g.hw()];
        for co in 0..g.c_out {
            for y in 0..g.h {
                for xx in 0..g.w {
                    let mut s = b[co];
                    for ci in 0..g.c_in {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let sy = y as isize + ky as isize - pad;
                                let sx = xx as isize + kx as isize - pad;
                                if sy < 0 || sx < 0 || sy >= g.h as isize || sx >= g.w as isize {
                                    continue;
                                }
                                s += wgt[((co * g.c_in + ci) * g.k + ky) * g.k + kx]
                                    * x[(ci * g.h + sy as usize) * g.w + sx as usize];
                            }
                        }
                    }
                    out[(co * g.h + y) * g.w + xx] = s;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        let g = ConvGeom { c_in: 2, c_out: 3, h: 4, w: 5, k: 3 };
        let x: Vec<f64> = (0..g.c_in * g.hw()).map(|i| (i as f64 * 0.37).sin()).collect();
        let wgt: Vec<f64> = (0..g.c_out * g.patch()).map(|i| (i as f64 * 0.11).cos()).collect();
        let b = vec![0.1, -0.2, 0.3];
        let fast = conv_forward(&im2col(&x, g), &wgt, &b, g);
        let slow = conv_naive(&x, &wgt, &b, g);
        for (a, c) in fast.iter().zip(&slow) {
            assert!((a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom { c_in: 2, c_out: 1, h: 3, w: 4, k: 3 };
        let x: Vec<f64> = (0..g.c_in * g.hw()).map(|i| (i as f64).sin()).collect();
        let y: Vec<f64> = (0..g.patch() * g.hw()).map(|i| (i as f64 * 0.7).cos()).collect();
        let lhs = dot(&im2col(&x, g), &y);
        let mut back = vec![0.0; x.len()];
        col2im_add(&y, g, &mut back);
        let rhs = dot(&x, &back);
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn upsample_taps_follow_half_pixel_convention() {
        let taps = AxisTaps::new(2, 4);
        let out = resize_forward(&[0.0, 1.0], 1, 1, 2, &AxisTaps::new(1, 1), &taps);
        assert_eq!(out, vec![0.0, 0.25, 0.75, 1.0]);
    }
}
