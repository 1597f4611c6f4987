// SPDX-License-Identifier: Apache-2.0

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::arch::{ArchConfig, Variant};
use super::init::{orthogonal, truncated_normal, BIAS_STD};
use super::latent::{combine, GaussianNodes, GaussianParams, LatentSample, LatentSource, LOG_SIGMA_CLAMP};
use crate::diff::{DiffTensor, ParamGroup, ParamId, ParamStore, Resize, Tape, TensorId};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::RngStream;
use crate::seg::SegMap;

/// Which density net to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DensityNet {
    Prior,
    Posterior,
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

impl Conv {
    fn apply(self, tape: &mut Tape, store: &ParamStore, x: TensorId) -> Result<TensorId> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv2d(x, w, b)
    }
}

/// Registers parameters, drawing initial values when given an rng.
struct Builder<'a> {
    store: ParamStore,
    rng: Option<&'a mut RngStream>,
}

impl Builder<'_> {
    fn conv(&mut self, group: ParamGroup, name: &str, c_out: usize, c_in: usize, k: usize) -> Result<Conv> {
        let fan_in = c_in * k * k;
        let (wv, bv) = match self.rng.as_deref_mut() {
            Some(rng) => (orthogonal(c_out, fan_in, rng), truncated_normal(c_out, BIAS_STD, rng)),
            None => (vec![0.0; c_out * fan_in], vec![0.0; c_out]),
        };
        let prefix = group.as_str();
        let w = self.store.register(&format!("{prefix}/{name}.w"), group, &[c_out, c_in, k, k], wv)?;
        let b = self.store.register(&format!("{prefix}/{name}.b"), group, &[c_out], bv)?;
        Ok(Conv { w, b })
    }

    fn encoder(&mut self, arch: &ArchConfig, group: ParamGroup, c_in: usize) -> Result<Vec<Vec<Conv>>> {
        let mut blocks = Vec::with_capacity(arch.scales + 1);
        let mut prev = c_in;
        for l in 0..=arch.scales {
            let c = arch.level_channels(l);
            let mut block = Vec::with_capacity(arch.convs_per_block);
            for i in 0..arch.convs_per_block {
                block.push(self.conv(group, &format!("enc{l}.c{i}"), c, if i == 0 { prev } else { c }, arch.kernel)?);
            }
            prev = c;
            blocks.push(block);
        }
        Ok(blocks)
    }

    fn density(&mut self, arch: &ArchConfig, group: ParamGroup, c_in: usize) -> Result<Density> {
        let encoder = self.encoder(arch, group, c_in)?;
        let out = self.conv(group, "out", 2 * arch.latent_dim, arch.level_channels(arch.scales), 1)?;
        Ok(Density { encoder, out })
    }
}

#[derive(Clone, Debug)]
struct Density {
    encoder: Vec<Vec<Conv>>,
    out: Conv,
}

/// One independently parameterized network. Ensembles hold several.
#[derive(Clone, Debug)]
pub struct Network {
    store: ParamStore,
    encoder: Vec<Vec<Conv>>,
    decoder: Vec<Vec<Conv>>,
    head: Vec<Conv>,
    heads: Vec<Conv>,
    prior: Option<Density>,
    posterior: Option<Density>,
}

impl Network {
    fn build(arch: &ArchConfig, rng: Option<&mut RngStream>) -> Result<Network> {
        let v = arch.variant;
        let n = arch.latent_dim;
        let mut b = Builder { store: ParamStore::new(), rng };
        let core_in = arch.in_channels + if v.early_injection() { n } else { 0 };
        let encoder = b.encoder(arch, ParamGroup::Unet, core_in)?;
        let mut decoder = Vec::with_capacity(arch.scales);
        for l in 0..arch.scales {
            let c = arch.level_channels(l);
            let c_in = arch.level_channels(l + 1) + c;
            let mut block = Vec::with_capacity(arch.convs_per_block);
            for i in 0..arch.convs_per_block {
                block.push(b.conv(ParamGroup::Unet, &format!("dec{l}.c{i}"), c, if i == 0 { c_in } else { c }, arch.kernel)?);
            }
            decoder.push(block);
        }
        let base = arch.base_channels;
        let mut head = Vec::new();
        let mut heads = Vec::new();
        if v == Variant::MHeads {
            for j in 0..arch.heads {
                heads.push(b.conv(ParamGroup::Head, &format!("h{j}"), arch.num_classes, base, 1)?);
            }
        } else {
            let (group, extra) = if v.late_injection() { (ParamGroup::Combine, n) } else { (ParamGroup::Head, 0) };
            let hid = base;
            head.push(b.conv(group, "c0", hid, base + extra, 1)?);
            head.push(b.conv(group, "c1", hid, hid, 1)?);
            head.push(b.conv(group, "c2", arch.num_classes, hid, 1)?);
        }
        let prior = if v.learned_prior() { Some(b.density(arch, ParamGroup::Prior, arch.in_channels)?) } else { None };
        let posterior = if v.is_latent() {
            let c_in = arch.num_classes + if v.posterior_sees_image() { arch.in_channels } else { 0 };
            Some(b.density(arch, ParamGroup::Posterior, c_in)?)
        } else {
            None
        };
        Ok(Network { store: b.store, encoder, decoder, head, heads, prior, posterior })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

fn encode(
    arch: &ArchConfig,
    blocks: &[Vec<Conv>],
    store: &ParamStore,
    tape: &mut Tape,
    mut x: TensorId,
    mut drop: Option<&mut RngStream>,
) -> Result<Vec<TensorId>> {
    let mut outs = Vec::with_capacity(blocks.len());
    for (l, block) in blocks.iter().enumerate() {
        if l > 0 {
            x = tape.bilinear_resize(x, Resize::Down(2))?;
        }
        if let Some(rng) = drop.as_deref_mut() {
            if l + 1 >= arch.scales {
                x = tape.dropout(x, arch.dropout_p, rng)?;
            }
        }
        for conv in block {
            x = conv.apply(tape, store, x)?;
            x = tape.relu(x);
        }
        outs.push(x);
    }
    Ok(outs)
}

/// Argmax over channels per pixel; ties go to the lower class.
pub fn argmax(logits: &[f64], num_classes: usize, height: usize, width: usize) -> Result<SegMap> {
    let hw = height * width;
    if logits.len() != num_classes * hw {
        return Err(Error::shape("argmax", format!("{} logits for {num_classes}x{height}x{width}", logits.len())));
    }
    let mut classes = vec![0u8; hw];
    for (p, out) in classes.iter_mut().enumerate() {
        let mut best = logits[p];
        for c in 1..num_classes {
            let v = logits[c * hw + p];
            if v > best {
                best = v;
                *out = c as u8;
            }
        }
    }
    SegMap::new(height, width, num_classes, classes)
}

/// Segmentations decoded over a plane of whitened latent coordinates.
#[derive(Clone, Debug)]
pub struct LatentGrid {
    pub steps: usize,
    pub plane: (usize, usize),
    /// Whitened coordinates `(u_a, u_b)`, row-major over the grid.
    pub coords: Vec<(f64, f64)>,
    pub latents: Vec<LatentSample>,
    pub maps: Vec<SegMap>,
}

/// A variant's full parameter set plus its architecture.
#[derive(Clone, Debug)]
pub struct Model {
    arch: ArchConfig,
    nets: Vec<Network>,
}

const INIT_TAG: u64 = 0x696e_6974;

impl Model {
    /// Freshly initialized model. Ensemble members draw from derived streams.
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Model> {
        arch.validate()?;
        let root = RngStream::new(seed, INIT_TAG);
        let nets = (0..arch.network_count())
            .map(|i| Network::build(&arch, Some(&mut root.derive(i as u64))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Model { arch, nets })
    }

    /// Rebuild from stored parameters. Every expected tensor must be present
    /// with the expected shape and nothing else.
    pub fn from_stores(arch: ArchConfig, stores: Vec<ParamStore>) -> Result<Model> {
        arch.validate()?;
        if stores.len() != arch.network_count() {
            return Err(Error::Config(format!("{} parameter sets for {} networks", stores.len(), arch.network_count())));
        }
        let mut nets = Vec::with_capacity(stores.len());
        for store in stores {
            let mut net = Network::build(&arch, None)?;
            if store.len() != net.store.len() {
                return Err(Error::Config(format!("{} tensors, layout expects {}", store.len(), net.store.len())));
            }
            for (_, p) in store.iter() {
                let id = net.store.find(&p.name).ok_or_else(|| Error::Config(format!("unexpected tensor `{}`", p.name)))?;
                let dst = net.store.get_mut(id);
                if dst.shape != p.shape {
                    return Err(Error::Config(format!("tensor `{}` has the wrong shape", p.name)));
                }
                dst.value.clone_from(&p.value);
                dst.m.clone_from(&p.m);
                dst.v.clone_from(&p.v);
            }
            net.store.set_step(store.step());
            nets.push(net);
        }
        Ok(Model { arch, nets })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn variant(&self) -> Variant {
        self.arch.variant
    }

    pub fn networks(&self) -> &[Network] {
        &self.nets
    }

    pub fn network_mut(&mut self, member: usize) -> &mut Network {
        &mut self.nets[member]
    }

    pub fn store(&self, member: usize) -> &ParamStore {
        &self.nets[member].store
    }

    pub fn store_mut(&mut self, member: usize) -> &mut ParamStore {
        &mut self.nets[member].store
    }

    fn net(&self, member: usize) -> Result<&Network> {
        self.nets.get(member).ok_or_else(|| Error::invalid("model", format!("no member {member}")))
    }

    fn variant_error(&self, detail: &str) -> Error {
        Error::Variant { variant: self.arch.variant.name(), detail: String::from(detail) }
    }

    /// Put an image on the tape after checking its channels and extents.
    pub fn image_node(&self, tape: &mut Tape, x: &Image) -> Result<TensorId> {
        if x.channels() != self.arch.in_channels {
            return Err(Error::shape("model input", format!("{} channels, expected {}", x.channels(), self.arch.in_channels)));
        }
        self.arch.check_extents(x.height(), x.width())?;
        tape.constant(&x.shape(), x.data().to_vec())
    }

    fn check_map(&self, y: &SegMap, x: TensorId, tape: &Tape) -> Result<()> {
        let s = tape.shape(x);
        if y.num_classes() != self.arch.num_classes || [y.height(), y.width()] != s[1..] {
            return Err(Error::shape("model mask", format!("{}x{} with {} classes", y.height(), y.width(), y.num_classes())));
        }
        Ok(())
    }

    fn latent_node(&self, tape: &Tape, z: TensorId) -> Result<()> {
        if tape.shape(z) != [self.arch.latent_dim] {
            return Err(Error::shape("latent", format!("length {}, expected {}", tape.value(z).len(), self.arch.latent_dim)));
        }
        Ok(())
    }

    /// Last decoder activation, `base_channels × H × W`.
    ///
    /// Early-injection variants need `latent`; the dropout variant needs `rng`.
    pub fn unet_features(
        &self,
        tape: &mut Tape,
        member: usize,
        x: TensorId,
        latent: Option<TensorId>,
        rng: Option<&mut RngStream>,
    ) -> Result<TensorId> {
        let net = self.net(member)?;
        let arch = &self.arch;
        let (_, h, w) = match *tape.shape(x) {
            [c, h, w] => (c, h, w),
            _ => return Err(Error::shape("unet_features", "expected C×H×W input")),
        };
        arch.check_extents(h, w)?;
        let input = match (arch.variant.early_injection(), latent) {
            (true, Some(z)) => {
                self.latent_node(tape, z)?;
                let planes = tape.broadcast_spatial(z, h, w)?;
                tape.concat_channels(x, planes)?
            }
            (true, None) => return Err(self.variant_error("features need a latent sample")),
            (false, _) => x,
        };
        let drop = if arch.variant == Variant::DropoutUnet && arch.dropout_p > 0.0 {
            Some(rng.ok_or_else(|| self.variant_error("dropout needs an rng"))?)
        } else {
            None
        };
        let mut drop = drop;
        let skips = encode(arch, &net.encoder, &net.store, tape, input, drop.as_deref_mut())?;
        let mut y = skips[arch.scales];
        for l in (0..arch.scales).rev() {
            let up = tape.bilinear_resize(y, Resize::Up(2))?;
            y = tape.concat_channels(up, skips[l])?;
            if let Some(r) = drop.as_deref_mut() {
                if l + 1 >= arch.scales {
                    y = tape.dropout(y, arch.dropout_p, r)?;
                }
            }
            for conv in &net.decoder[l] {
                y = conv.apply(tape, &net.store, y)?;
                y = tape.relu(y);
            }
        }
        Ok(y)
    }

    /// Prior or posterior Gaussian on the tape. Fixed priors come back as
    /// constant standard normals.
    pub fn density_nodes(
        &self,
        tape: &mut Tape,
        member: usize,
        which: DensityNet,
        x: TensorId,
        y: Option<&SegMap>,
    ) -> Result<GaussianNodes> {
        let net = self.net(member)?;
        let arch = &self.arch;
        if !arch.variant.is_latent() {
            return Err(self.variant_error("no latent space"));
        }
        let (layers, input) = match which {
            DensityNet::Prior => match &net.prior {
                None => return GaussianNodes::constant(tape, &GaussianParams::standard(arch.latent_dim)),
                Some(d) => (d, x),
            },
            DensityNet::Posterior => {
                let y = y.ok_or_else(|| Error::invalid("density_forward", "posterior needs a mask"))?;
                self.check_map(y, x, tape)?;
                let hot = tape.constant(&[arch.num_classes, y.height(), y.width()], y.one_hot())?;
                let input = if arch.variant.posterior_sees_image() { tape.concat_channels(x, hot)? } else { hot };
                (net.posterior.as_ref().expect("latent variants have a posterior"), input)
            }
        };
        let feats = encode(arch, &layers.encoder, &net.store, tape, input, None)?;
        let top = arch.level_channels(arch.scales);
        let pooled = tape.global_avg_pool(feats[arch.scales])?;
        let pooled = tape.reshape(pooled, &[top, 1, 1])?;
        let out = layers.out.apply(tape, &net.store, pooled)?;
        let n = arch.latent_dim;
        let out = tape.reshape(out, &[2 * n])?;
        let mu = tape.slice(out, 0, n)?;
        let raw = tape.slice(out, n, n)?;
        let log_sigma = tape.clamp(raw, -LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP);
        Ok(GaussianNodes { mu, log_sigma })
    }

    /// Output head. Late-injection variants concatenate the broadcast latent
    /// to the features first and require `z`.
    pub fn f_comb(&self, tape: &mut Tape, member: usize, features: TensorId, z: Option<TensorId>) -> Result<TensorId> {
        let net = self.net(member)?;
        if net.head.is_empty() {
            return Err(self.variant_error("no combination head"));
        }
        let mut x = if self.arch.variant.late_injection() {
            let z = z.ok_or_else(|| self.variant_error("head needs a latent sample"))?;
            self.latent_node(tape, z)?;
            let (h, w) = match *tape.shape(features) {
                [_, h, w] => (h, w),
                _ => return Err(Error::shape("f_comb", "expected C×H×W features")),
            };
            let planes = tape.broadcast_spatial(z, h, w)?;
            tape.concat_channels(features, planes)?
        } else {
            features
        };
        let last = net.head.len() - 1;
        for (i, conv) in net.head.iter().enumerate() {
            x = conv.apply(tape, &net.store, x)?;
            if i < last {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }

    /// One logit map per head over a shared trunk.
    pub fn mheads_nodes(&self, tape: &mut Tape, x: TensorId) -> Result<Vec<TensorId>> {
        if self.arch.variant != Variant::MHeads {
            return Err(self.variant_error("not a multi-head model"));
        }
        let feats = self.unet_features(tape, 0, x, None, None)?;
        let net = &self.nets[0];
        net.heads.iter().map(|h| h.apply(tape, &net.store, feats)).collect()
    }

    /// End-to-end logits for one member with an explicit latent.
    pub fn logits(
        &self,
        tape: &mut Tape,
        member: usize,
        x: TensorId,
        z: Option<TensorId>,
        rng: Option<&mut RngStream>,
    ) -> Result<TensorId> {
        let early = if self.arch.variant.early_injection() { z } else { None };
        let feats = self.unet_features(tape, member, x, early, rng)?;
        self.f_comb(tape, member, feats, z)
    }

    fn to_map(&self, tape: &Tape, logits: TensorId) -> Result<SegMap> {
        let s = tape.shape(logits);
        argmax(tape.value(logits), s[0], s[1], s[2])
    }

    pub fn density_forward(&self, which: DensityNet, x: &Image, y: Option<&SegMap>) -> Result<GaussianParams> {
        let mut tape = Tape::inference();
        let xn = self.image_node(&mut tape, x)?;
        Ok(self.density_nodes(&mut tape, 0, which, xn, y)?.values(&tape))
    }

    pub fn mheads_forward(&self, x: &Image) -> Result<Vec<DiffTensor>> {
        let mut tape = Tape::inference();
        let xn = self.image_node(&mut tape, x)?;
        let ids = self.mheads_nodes(&mut tape, xn)?;
        Ok(ids.into_iter().map(|i| tape.tensor(i).clone()).collect())
    }

    /// Isolated end-to-end pass for a latent variant with a given `z`.
    pub fn decode(&self, x: &Image, z: &[f64]) -> Result<SegMap> {
        if !self.arch.variant.is_latent() {
            return Err(self.variant_error("no latent space"));
        }
        let mut tape = Tape::inference();
        let xn = self.image_node(&mut tape, x)?;
        let zn = tape.constant(&[z.len()], z.to_vec())?;
        let logits = self.logits(&mut tape, 0, xn, Some(zn), None)?;
        self.to_map(&tape, logits)
    }

    /// Largest `m` accepted by [`Model::predict`], if bounded.
    pub fn max_samples(&self) -> Option<usize> {
        match self.arch.variant {
            Variant::Ensemble => Some(self.arch.members),
            Variant::MHeads => Some(self.arch.heads),
            _ => None,
        }
    }

    pub fn predict(&self, x: &Image, m: usize, rng: &mut RngStream) -> Result<Vec<SegMap>> {
        Ok(self.predict_with_latents(x, m, rng)?.0)
    }

    /// Like [`Model::predict`], also returning the latents used (empty for
    /// variants without a latent space).
    pub fn predict_with_latents(&self, x: &Image, m: usize, rng: &mut RngStream) -> Result<(Vec<SegMap>, Vec<LatentSample>)> {
        if let Some(limit) = self.max_samples() {
            if m > limit {
                return Err(self.variant_error(&format!("{m} samples requested, at most {limit} available")));
            }
        }
        let mut tape = Tape::inference();
        let xn = self.image_node(&mut tape, x)?;
        let mut maps = Vec::with_capacity(m);
        let mut latents = Vec::new();
        let v = self.arch.variant;
        match v {
            Variant::DropoutUnet => {
                for _ in 0..m {
                    let logits = self.logits(&mut tape, 0, xn, None, Some(rng))?;
                    maps.push(self.to_map(&tape, logits)?);
                }
            }
            Variant::Ensemble => {
                for i in 0..m {
                    let logits = self.logits(&mut tape, i, xn, None, None)?;
                    maps.push(self.to_map(&tape, logits)?);
                }
            }
            Variant::MHeads => {
                for logits in self.mheads_nodes(&mut tape, xn)?.into_iter().take(m) {
                    maps.push(self.to_map(&tape, logits)?);
                }
            }
            _ => {
                let prior = self.density_nodes(&mut tape, 0, DensityNet::Prior, xn, None)?.values(&tape);
                let feats = if v.late_injection() { Some(self.unet_features(&mut tape, 0, xn, None, None)?) } else { None };
                for _ in 0..m {
                    let eps: Vec<f64> = (0..prior.dim()).map(|_| rng.normal()).collect();
                    let z = combine(&prior, &eps);
                    let zn = tape.constant(&[z.len()], z.clone())?;
                    let logits = match feats {
                        Some(f) => self.f_comb(&mut tape, 0, f, Some(zn))?,
                        None => self.logits(&mut tape, 0, xn, Some(zn), None)?,
                    };
                    maps.push(self.to_map(&tape, logits)?);
                    latents.push(LatentSample { z, source: LatentSource::Prior });
                }
            }
        }
        Ok((maps, latents))
    }

    /// Decode a `steps × steps` grid `z = mu + sigma ⊙ u`, where `u` is zero
    /// off the plane and spans `[-span_sigma, span_sigma]` on its two axes.
    pub fn latent_grid(&self, x: &Image, plane: (usize, usize), steps: usize, span_sigma: f64) -> Result<LatentGrid> {
        let n = self.arch.latent_dim;
        if !self.arch.variant.is_latent() {
            return Err(self.variant_error("no latent space"));
        }
        if plane.0 >= n || plane.1 >= n || plane.0 == plane.1 {
            return Err(Error::invalid("latent_grid", format!("plane {plane:?} invalid for latent dim {n}")));
        }
        if steps == 0 || !(span_sigma >= 0.0) || !span_sigma.is_finite() {
            return Err(Error::invalid("latent_grid", "steps must be positive and span finite and non-negative"));
        }
        let mut tape = Tape::inference();
        let xn = self.image_node(&mut tape, x)?;
        let prior = self.density_nodes(&mut tape, 0, DensityNet::Prior, xn, None)?.values(&tape);
        let feats = if self.arch.variant.late_injection() { Some(self.unet_features(&mut tape, 0, xn, None, None)?) } else { None };
        let axis = |i: usize| if steps == 1 { 0.0 } else { span_sigma * ((2 * i) as f64 / (steps - 1) as f64 - 1.0) };
        let mut grid = LatentGrid { steps, plane, coords: Vec::new(), latents: Vec::new(), maps: Vec::new() };
        for r in 0..steps {
            for c in 0..steps {
                let mut u = vec![0.0; n];
                u[plane.0] = axis(r);
                u[plane.1] = axis(c);
                let z = combine(&prior, &u);
                let zn = tape.constant(&[n], z.clone())?;
                let logits = match feats {
                    Some(f) => self.f_comb(&mut tape, 0, f, Some(zn))?,
                    None => self.logits(&mut tape, 0, xn, Some(zn), None)?,
                };
                grid.maps.push(self.to_map(&tape, logits)?);
                grid.coords.push((u[plane.0], u[plane.1]));
                grid.latents.push(LatentSample { z, source: LatentSource::Grid });
            }
        }
        Ok(grid)
    }

    /// Posterior mean in prior-whitened coordinates.
    pub fn posterior_project(&self, x: &Image, y: &SegMap) -> Result<Vec<f64>> {
        let prior = self.density_forward(DensityNet::Prior, x, None)?;
        let post = self.density_forward(DensityNet::Posterior, x, Some(y))?;
        Ok(post.mu().iter().zip(prior.mu()).zip(prior.sigma()).map(|((q, p), s)| (q - p) / s).collect())
    }
}
