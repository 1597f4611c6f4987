// SPDX-License-Identifier: Apache-2.0

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::mem;

use super::kernels::{self, AxisTaps, ConvGeom, Resize};
use super::params::{ParamId, ParamStore};
use crate::error::{fmt_shape, Error, Result};
use crate::rng::RngStream;
use crate::seg::SegMap;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A value grid taking part in differentiation.
///
/// `grad` is allocated (zero-filled, same shape as `values`) for every
/// tensor with `requires_grad` when [`Tape::backward`] runs.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
    pub requires_grad: bool,
}

impl DiffTensor {
    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d { x: TensorId, w: TensorId, b: TensorId, geom: ConvGeom, cols: Vec<f64> },
    Relu(TensorId),
    Softmax(TensorId),
    Resize { x: TensorId, rows: AxisTaps, cols: AxisTaps },
    AvgPool(TensorId),
    Concat(TensorId, TensorId),
    Broadcast(TensorId),
    Dropout { x: TensorId, scale: Vec<f64> },
    CrossEntropy { logits: TensorId, target: Vec<u8>, valid: Vec<bool>, count: usize, probs: Vec<f64> },
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    Exp(TensorId),
    Clamp { x: TensorId, lo: f64, hi: f64 },
    Sum(TensorId),
    Slice { x: TensorId, start: usize },
    Reshape(TensorId),
    WeightedSum { xs: Vec<TensorId>, weights: Vec<f64> },
    KlDiag { mq: TensorId, lq: TensorId, mp: TensorId, lp: TensorId },
}

/// Records a forward computation for a later reverse sweep.
///
/// Tensors are appended in evaluation order, so every operation's inputs
/// precede it and the reverse sweep is a single backwards pass.
#[derive(Clone, Debug)]
pub struct Tape {
    nodes: Vec<DiffTensor>,
    ops: Vec<Op>,
    params: BTreeMap<ParamId, TensorId>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), ops: Vec::new(), params: BTreeMap::new(), grad_enabled: true }
    }

    /// A tape that records values only; nothing on it requires gradients and
    /// no backward caches are kept.
    pub fn inference() -> Self {
        Tape { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn tensor(&self, id: TensorId) -> &DiffTensor {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].values
    }

    /// Scalar value of a single-element tensor.
    pub fn scalar(&self, id: TensorId) -> f64 {
        self.nodes[id.0].values[0]
    }

    pub fn grad(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let id = TensorId(self.nodes.len());
        self.nodes.push(DiffTensor { shape, values, grad: Vec::new(), requires_grad: requires_grad && self.grad_enabled });
        self.ops.push(op);
        id
    }

    fn req(&self, ids: &[TensorId]) -> bool {
        self.grad_enabled && ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn check_same(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{} vs {}", fmt_shape(self.shape(a)), fmt_shape(self.shape(b)))));
        }
        Ok(())
    }

    fn chw(&self, op: &'static str, x: TensorId) -> Result<(usize, usize, usize)> {
        match *self.shape(x) {
            [c, h, w] => Ok((c, h, w)),
            ref s => Err(Error::shape(op, format!("expected C×H×W, got {}", fmt_shape(s)))),
        }
    }

    pub fn leaf(&mut self, shape: &[usize], values: Vec<f64>, requires_grad: bool) -> Result<TensorId> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::shape("leaf", format!("{} values for shape {}", values.len(), fmt_shape(shape))));
        }
        Ok(self.push(shape.to_vec(), values, requires_grad, Op::Leaf))
    }

    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<TensorId> {
        self.leaf(shape, values, false)
    }

    /// Bind a stored parameter as a leaf. Each parameter is copied onto the
    /// tape at most once; later calls return the same tensor.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> TensorId {
        if let Some(&t) = self.params.get(&id) {
            return t;
        }
        let p = store.get(id);
        let t = self.push(p.shape.clone(), p.value.clone(), true, Op::Leaf);
        self.params.insert(id, t);
        t
    }

    /// Add the gradients of every bound parameter into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (&pid, &tid) in &self.params {
            let g = &self.nodes[tid.0].grad;
            if g.is_empty() {
                continue;
            }
            for (dst, v) in store.get_mut(pid).grad.iter_mut().zip(g) {
                *dst += v;
            }
        }
    }

    /// Same-padded, stride-1 2-D convolution with an odd square kernel.
    pub fn conv2d(&mut self, x: TensorId, kernel: TensorId, bias: TensorId) -> Result<TensorId> {
        let (c_in, h, w) = self.chw("conv2d", x)?;
        let (c_out, kc_in, k) = match *self.shape(kernel) {
            [co, ci, kh, kw] if kh == kw => (co, ci, kh),
            ref s => return Err(Error::shape("conv2d", format!("kernel must be C_out×C_in×k×k, got {}", fmt_shape(s)))),
        };
        if k % 2 == 0 {
            return Err(Error::invalid("conv2d", format!("kernel size {k} is even")));
        }
        if kc_in != c_in {
            return Err(Error::shape("conv2d", format!("input has {c_in} channels, kernel expects {kc_in}")));
        }
        if self.shape(bias) != [c_out] {
            return Err(Error::shape("conv2d", format!("bias {} for {c_out} outputs", fmt_shape(self.shape(bias)))));
        }
        let geom = ConvGeom { c_in, c_out, h, w, k };
        let cols = if k == 1 { self.value(x).to_vec() } else { kernels::im2col(self.value(x), geom) };
        let out = kernels::conv_forward(&cols, self.value(kernel), self.value(bias), geom);
        let rg = self.req(&[x, kernel, bias]);
        let cols = if rg { cols } else { Vec::new() };
        Ok(self.push(vec![c_out, h, w], out, rg, Op::Conv2d { x, w: kernel, b: bias, geom, cols }))
    }

    /// Elementwise max(x, 0); the subgradient at 0 is 0.
    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let out = self.value(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let rg = self.req(&[x]);
        self.push(self.shape(x).to_vec(), out, rg, Op::Relu(x))
    }

    /// Softmax over the channel axis of a C×H×W tensor, per pixel.
    pub fn softmax_channels(&mut self, x: TensorId) -> Result<TensorId> {
        let (c, h, w) = self.chw("softmax_channels", x)?;
        let out = softmax(self.value(x), c, h * w);
        let rg = self.req(&[x]);
        Ok(self.push(vec![c, h, w], out, rg, Op::Softmax(x)))
    }

    pub fn bilinear_resize(&mut self, x: TensorId, factor: Resize) -> Result<TensorId> {
        let (c, h, w) = self.chw("bilinear_resize", x)?;
        let (oh, ow) = match factor {
            Resize::Up(f) | Resize::Down(f) if f == 0 || !f.is_power_of_two() => {
                return Err(Error::invalid("bilinear_resize", format!("factor {f} is not a power of two")))
            }
            Resize::Up(f) => (h * f, w * f),
            Resize::Down(f) => {
                if h % f != 0 || w % f != 0 {
                    return Err(Error::shape("bilinear_resize", format!("{h}x{w} not divisible by {f}")));
                }
                (h / f, w / f)
            }
        };
        let rows = AxisTaps::new(h, oh);
        let cols = AxisTaps::new(w, ow);
        let out = kernels::resize_forward(self.value(x), c, h, w, &rows, &cols);
        let rg = self.req(&[x]);
        Ok(self.push(vec![c, oh, ow], out, rg, Op::Resize { x, rows, cols }))
    }

    /// Per-channel spatial mean; C×H×W → C.
    pub fn global_avg_pool(&mut self, x: TensorId) -> Result<TensorId> {
        let (c, h, w) = self.chw("global_avg_pool", x)?;
        let hw = h * w;
        if hw == 0 {
            return Err(Error::shape("global_avg_pool", "empty spatial extent"));
        }
        let out = self.value(x).chunks(hw).map(|p| kernels::sum(p) / hw as f64).collect();
        let rg = self.req(&[x]);
        Ok(self.push(vec![c], out, rg, Op::AvgPool(x)))
    }

    /// Stack `b`'s channels after `a`'s.
    pub fn concat_channels(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ca, ha, wa) = self.chw("concat_channels", a)?;
        let (cb, hb, wb) = self.chw("concat_channels", b)?;
        if (ha, wa) != (hb, wb) {
            return Err(Error::shape("concat_channels", format!("spatial {ha}x{wa} vs {hb}x{wb}")));
        }
        let mut out = Vec::with_capacity((ca + cb) * ha * wa);
        out.extend_from_slice(self.value(a));
        out.extend_from_slice(self.value(b));
        let rg = self.req(&[a, b]);
        Ok(self.push(vec![ca + cb, ha, wa], out, rg, Op::Concat(a, b)))
    }

    /// Tile a length-N vector into N constant H×W planes.
    pub fn broadcast_spatial(&mut self, z: TensorId, h: usize, w: usize) -> Result<TensorId> {
        let n = match *self.shape(z) {
            [n] => n,
            ref s => return Err(Error::shape("broadcast_spatial", format!("expected a vector, got {}", fmt_shape(s)))),
        };
        let mut out = Vec::with_capacity(n * h * w);
        for &v in self.value(z) {
            out.extend(core::iter::repeat_n(v, h * w));
        }
        let rg = self.req(&[z]);
        Ok(self.push(vec![n, h, w], out, rg, Op::Broadcast(z)))
    }

    /// Inverted dropout: each unit is zeroed with probability `p` and
    /// survivors are scaled by 1/(1−p). `p = 0` returns `x` unchanged and
    /// consumes no random draws.
    pub fn dropout(&mut self, x: TensorId, p: f64, rng: &mut RngStream) -> Result<TensorId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid("dropout", format!("probability {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let scale: Vec<f64> = (0..self.value(x).len()).map(|_| if rng.uniform() < p { 0.0 } else { keep }).collect();
        let out = self.value(x).iter().zip(&scale).map(|(v, s)| v * s).collect();
        let rg = self.req(&[x]);
        Ok(self.push(self.shape(x).to_vec(), out, rg, Op::Dropout { x, scale }))
    }

    /// Mean negative log-likelihood of `target` under per-pixel softmax of
    /// `logits`, over pixels that are neither in `ignore` nor ignored by the
    /// target map. Returns 0 when every pixel is ignored.
    pub fn cross_entropy_masked(&mut self, logits: TensorId, target: &SegMap, ignore: Option<&[bool]>) -> Result<TensorId> {
        let (c, h, w) = self.chw("cross_entropy_masked", logits)?;
        if (target.height(), target.width()) != (h, w) {
            return Err(Error::shape("cross_entropy_masked", format!("logits {h}x{w}, target {}x{}", target.height(), target.width())));
        }
        if ignore.is_some_and(|m| m.len() != h * w) {
            return Err(Error::shape("cross_entropy_masked", "ignore mask size"));
        }
        let hw = h * w;
        let mut valid = vec![true; hw];
        for (i, v) in valid.iter_mut().enumerate() {
            *v = !target.is_ignored(i) && !ignore.is_some_and(|m| m[i]);
            let t = target.classes()[i];
            if *v && t as usize >= c {
                return Err(Error::ClassOutOfRange { class: t, num_classes: c });
            }
        }
        let probs = softmax(self.value(logits), c, hw);
        let count = valid.iter().filter(|&&v| v).count();
        let mut total = 0.0;
        for p in 0..hw {
            if valid[p] {
                let t = target.classes()[p] as usize;
                // log softmax computed from logits for accuracy
                let x = self.value(logits);
                let m = (0..c).map(|ch| x[ch * hw + p]).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + libm::log((0..c).map(|ch| libm::exp(x[ch * hw + p] - m)).sum::<f64>());
                total += lse - x[t * hw + p];
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let rg = self.req(&[logits]);
        let (target, probs) = if rg { (target.classes().to_vec(), probs) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(vec![1], vec![loss], rg, Op::CrossEntropy { logits, target, valid, count, probs }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.req(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let rg = self.req(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.req(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let rg = self.req(&[x]);
        self.push(self.shape(x).to_vec(), out, rg, Op::Scale(x, c))
    }

    pub fn exp(&mut self, x: TensorId) -> TensorId {
        let out = self.value(x).iter().map(|&v| libm::exp(v)).collect();
        let rg = self.req(&[x]);
        self.push(self.shape(x).to_vec(), out, rg, Op::Exp(x))
    }

    /// Clamp into `[lo, hi]`; gradient passes only where the input lies
    /// inside the interval.
    pub fn clamp(&mut self, x: TensorId, lo: f64, hi: f64) -> TensorId {
        let out = self.value(x).iter().map(|&v| v.clamp(lo, hi)).collect();
        let rg = self.req(&[x]);
        self.push(self.shape(x).to_vec(), out, rg, Op::Clamp { x, lo, hi })
    }

    /// Which linear piece every relu and clamp input falls on. Two
    /// evaluations with equal signatures lie on one smooth branch.
    pub fn kink_signature(&self) -> Vec<u8> {
        let mut sig = Vec::new();
        for op in &self.ops {
            match op {
                Op::Relu(x) => sig.extend(self.value(*x).iter().map(|&v| u8::from(v > 0.0))),
                Op::Clamp { x, lo, hi } => {
                    sig.extend(self.value(*x).iter().map(|&v| u8::from(v >= *lo) + u8::from(v > *hi)))
                }
                _ => {}
            }
        }
        sig
    }

    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let s = kernels::sum(self.value(x));
        let rg = self.req(&[x]);
        self.push(vec![1], vec![s], rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: TensorId) -> TensorId {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Contiguous flat slice `[start, start + len)` as a vector.
    pub fn slice(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let n = self.value(x).len();
        if start + len > n {
            return Err(Error::shape("slice", format!("[{start}, {}) of {n}", start + len)));
        }
        let out = self.value(x)[start..start + len].to_vec();
        let rg = self.req(&[x]);
        Ok(self.push(vec![len], out, rg, Op::Slice { x, start }))
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape("reshape", format!("{} to {}", fmt_shape(self.shape(x)), fmt_shape(shape))));
        }
        let out = self.value(x).to_vec();
        let rg = self.req(&[x]);
        Ok(self.push(shape.to_vec(), out, rg, Op::Reshape(x)))
    }

    /// Σ weights[i] · xs[i] over same-shaped tensors.
    pub fn weighted_sum(&mut self, xs: &[TensorId], weights: &[f64]) -> Result<TensorId> {
        if xs.is_empty() || xs.len() != weights.len() {
            return Err(Error::invalid("weighted_sum", format!("{} tensors, {} weights", xs.len(), weights.len())));
        }
        for &x in &xs[1..] {
            self.check_same("weighted_sum", xs[0], x)?;
        }
        let mut out = vec![0.0; self.value(xs[0]).len()];
        for (&x, &wt) in xs.iter().zip(weights) {
            kernels::axpy(&mut out, wt, self.value(x));
        }
        let rg = self.req(xs);
        Ok(self.push(self.shape(xs[0]).to_vec(), out, rg, Op::WeightedSum { xs: xs.to_vec(), weights: weights.to_vec() }))
    }

    /// KL(Q‖P) between axis-aligned Gaussians given means and log standard
    /// deviations, summed over dimensions.
    pub fn kl_diag_gaussian(&mut self, mq: TensorId, lq: TensorId, mp: TensorId, lp: TensorId) -> Result<TensorId> {
        for other in [lq, mp, lp] {
            self.check_same("kl_diag_gaussian", mq, other)?;
        }
        let kl = kl_value(self.value(mq), self.value(lq), self.value(mp), self.value(lp));
        let rg = self.req(&[mq, lq, mp, lp]);
        Ok(self.push(vec![1], vec![kl], rg, Op::KlDiag { mq, lq, mp, lp }))
    }

    /// Reverse sweep from a scalar. Gradients of all tensors are reset
    /// first, so calling this twice on one tape does not double-count.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].values.len() != 1 {
            return Err(Error::shape("backward", format!("root has shape {}", fmt_shape(self.shape(loss)))));
        }
        for node in &mut self.nodes {
            node.grad = if node.requires_grad { vec![0.0; node.values.len()] } else { Vec::new() };
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad[0] = 1.0;
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let g = mem::take(&mut self.nodes[i].grad);
            if g.iter().any(|&v| v != 0.0) {
                let contributions = self.op_backward(i, &g);
                for (id, c) in contributions {
                    let dst = &mut self.nodes[id.0].grad;
                    for (d, v) in dst.iter_mut().zip(&c) {
                        *d += v;
                    }
                }
            }
            self.nodes[i].grad = g;
        }
        Ok(())
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn op_backward(&self, i: usize, g: &[f64]) -> Vec<(TensorId, Vec<f64>)> {
        let mut out = Vec::new();
        let mut emit = |id: TensorId, f: &dyn Fn() -> Vec<f64>| {
            if self.needs(id) {
                out.push((id, f()));
            }
        };
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, cols } => {
                if self.needs(*w) || self.needs(*b) {
                    let (dw, db) = kernels::conv_backward_params(cols, g, *geom);
                    emit(*w, &|| dw.clone());
                    emit(*b, &|| db.clone());
                }
                emit(*x, &|| {
                    let dcols = kernels::conv_backward_cols(self.value(*w), g, *geom);
                    if geom.k == 1 {
                        dcols
                    } else {
                        let mut dx = vec![0.0; geom.c_in * geom.hw()];
                        kernels::col2im_add(&dcols, *geom, &mut dx);
                        dx
                    }
                });
            }
            Op::Relu(x) => emit(*x, &|| self.value(*x).iter().zip(g).map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 }).collect()),
            Op::Softmax(x) => emit(*x, &|| {
                let (c, hw) = (self.shape(*x)[0], self.shape(*x)[1] * self.shape(*x)[2]);
                let y = &self.nodes[i].values;
                let mut dx = vec![0.0; c * hw];
                for p in 0..hw {
                    let s: f64 = (0..c).map(|ch| y[ch * hw + p] * g[ch * hw + p]).sum();
                    for ch in 0..c {
                        dx[ch * hw + p] = y[ch * hw + p] * (g[ch * hw + p] - s);
                    }
                }
                dx
            }),
            Op::Resize { x, rows, cols } => emit(*x, &|| {
                let s = self.shape(*x);
                kernels::resize_backward(g, s[0], s[1], s[2], rows, cols)
            }),
            Op::AvgPool(x) => emit(*x, &|| {
                let s = self.shape(*x);
                let hw = s[1] * s[2];
                g.iter().flat_map(|&gv| core::iter::repeat_n(gv / hw as f64, hw)).collect()
            }),
            Op::Concat(a, b) => {
                let na = self.value(*a).len();
                emit(*a, &|| g[..na].to_vec());
                emit(*b, &|| g[na..].to_vec());
            }
            Op::Broadcast(z) => emit(*z, &|| {
                let n = self.value(*z).len();
                let hw = g.len() / n.max(1);
                g.chunks(hw).map(kernels::sum).collect()
            }),
            Op::Dropout { x, scale } => emit(*x, &|| g.iter().zip(scale).map(|(a, b)| a * b).collect()),
            Op::CrossEntropy { logits, target, valid, count, probs } => emit(*logits, &|| {
                let mut dx = vec![0.0; probs.len()];
                if *count == 0 {
                    return dx;
                }
                let hw = valid.len();
                let c = probs.len() / hw;
                let k = g[0] / *count as f64;
                for p in 0..hw {
                    if !valid[p] {
                        continue;
                    }
                    for ch in 0..c {
                        let onehot = if target[p] as usize == ch { 1.0 } else { 0.0 };
                        dx[ch * hw + p] = k * (probs[ch * hw + p] - onehot);
                    }
                }
                dx
            }),
            Op::Add(a, b) => {
                emit(*a, &|| g.to_vec());
                emit(*b, &|| g.to_vec());
            }
            Op::Sub(a, b) => {
                emit(*a, &|| g.to_vec());
                emit(*b, &|| g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                emit(*a, &|| g.iter().zip(self.value(*b)).map(|(x, y)| x * y).collect());
                emit(*b, &|| g.iter().zip(self.value(*a)).map(|(x, y)| x * y).collect());
            }
            Op::Scale(x, c) => emit(*x, &|| g.iter().map(|v| v * c).collect()),
            Op::Exp(x) => emit(*x, &|| g.iter().zip(&self.nodes[i].values).map(|(a, y)| a * y).collect()),
            Op::Clamp { x, lo, hi } => emit(*x, &|| {
                self.value(*x).iter().zip(g).map(|(&v, &gv)| if v >= *lo && v <= *hi { gv } else { 0.0 }).collect()
            }),
            Op::Sum(x) => emit(*x, &|| vec![g[0]; self.value(*x).len()]),
            Op::Slice { x, start } => emit(*x, &|| {
                let mut dx = vec![0.0; self.value(*x).len()];
                dx[*start..*start + g.len()].copy_from_slice(g);
                dx
            }),
            Op::Reshape(x) => emit(*x, &|| g.to_vec()),
            Op::WeightedSum { xs, weights } => {
                for (&x, &wt) in xs.iter().zip(weights) {
                    emit(x, &|| g.iter().map(|v| v * wt).collect());
                }
            }
            Op::KlDiag { mq, lq, mp, lp } => {
                let (vmq, vlq, vmp, vlp) = (self.value(*mq), self.value(*lq), self.value(*mp), self.value(*lp));
                let n = vmq.len();
                let inv_vp: Vec<f64> = vlp.iter().map(|&l| libm::exp(-2.0 * l)).collect();
                let ratio: Vec<f64> = (0..n).map(|j| libm::exp(2.0 * (vlq[j] - vlp[j]))).collect();
                let g0 = g[0];
                emit(*mq, &|| (0..n).map(|j| g0 * (vmq[j] - vmp[j]) * inv_vp[j]).collect());
                emit(*mp, &|| (0..n).map(|j| -g0 * (vmq[j] - vmp[j]) * inv_vp[j]).collect());
                emit(*lq, &|| (0..n).map(|j| g0 * (ratio[j] - 1.0)).collect());
                emit(*lp, &|| {
                    (0..n)
                        .map(|j| {
                            let d = vmq[j] - vmp[j];
                            g0 * (1.0 - ratio[j] - d * d * inv_vp[j])
                        })
                        .collect()
                });
            }
        }
        out
    }
}

fn softmax(x: &[f64], c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * hw];
    for p in 0..hw {
        let m = (0..c).map(|ch| x[ch * hw + p]).fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for ch in 0..c {
            let e = libm::exp(x[ch * hw + p] - m);
            out[ch * hw + p] = e;
            s += e;
        }
        for ch in 0..c {
            out[ch * hw + p] /= s;
        }
    }
    out
}

/// Closed-form KL between diagonal Gaussians parameterized by log σ.
pub(crate) fn kl_value(mq: &[f64], lq: &[f64], mp: &[f64], lp: &[f64]) -> f64 {
    let mut kl = 0.0;
    for j in 0..mq.len() {
        let d = mq[j] - mp[j];
        // ratio form keeps KL(q, q) exactly zero
        kl += (lp[j] - lq[j]) + (libm::exp(2.0 * (lq[j] - lp[j])) + d * d * libm::exp(-2.0 * lp[j])) / 2.0 - 0.5;
    }
    kl
}
