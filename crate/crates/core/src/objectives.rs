// SPDX-License-Identifier: Apache-2.0

//! Training losses and the optimizer loop body.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::diff::{AdamConfig, Tape, TensorId};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nets::{DensityNet, GaussianNodes, GaussianParams, Model, Variant};
use crate::rng::RngStream;
use crate::seg::SegMap;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// KL weight.
    pub beta: f64,
    pub lr: f64,
    /// `(step, lr)` pairs; from `step` on the rate is `lr`. Sorted by step.
    pub lr_decay: Vec<(u64, f64)>,
    pub steps: u64,
    pub batch: usize,
    pub weight_decay: f64,
    /// Relaxation of the multi-head oracle loss.
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 1.0,
            lr: 1e-4,
            lr_decay: vec![(15_000, 1e-5)],
            steps: 20_000,
            batch: 8,
            weight_decay: 1e-5,
            epsilon: 0.05,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!("beta {} must be non-negative", self.beta)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!("epsilon {} outside (0, 1)", self.epsilon)));
        }
        if self.steps < 1 || self.batch < 1 {
            return Err(Error::Config("steps and batch must be positive".into()));
        }
        if !(self.lr >= 0.0) || self.lr_decay.iter().any(|(_, lr)| !(*lr >= 0.0)) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rates and weight decay must be non-negative".into()));
        }
        if self.lr_decay.windows(2).any(|w| w[0].0 > w[1].0) {
            return Err(Error::Config("lr_decay steps must be sorted".into()));
        }
        Ok(())
    }

    /// Learning rate for zero-based `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        self.lr_decay.iter().rev().find(|(s, _)| step >= *s).map_or(self.lr, |(_, lr)| *lr)
    }

    pub fn adam(&self, step: u64) -> AdamConfig {
        AdamConfig { weight_decay: self.weight_decay, ..AdamConfig::with_lr(self.lr_at(step)) }
    }
}

/// Closed-form KL(q‖p) summed over dimensions.
pub fn kl_diag_gaussian(tape: &mut Tape, q: &GaussianNodes, p: &GaussianNodes) -> Result<TensorId> {
    tape.kl_diag_gaussian(q.mu, q.log_sigma, p.mu, p.log_sigma)
}

/// KL(q‖p) on plain values.
pub fn kl_value(q: &GaussianParams, p: &GaussianParams) -> Result<f64> {
    let mut tape = Tape::inference();
    let qn = GaussianNodes::constant(&mut tape, q)?;
    let pn = GaussianNodes::constant(&mut tape, p)?;
    let kl = kl_diag_gaussian(&mut tape, &qn, &pn)?;
    Ok(tape.scalar(kl))
}

#[derive(Clone, Copy, Debug)]
pub struct ElboTerms {
    pub total: TensorId,
    pub ce: TensorId,
    pub kl: TensorId,
    /// The posterior draw fed to the decoder.
    pub z: TensorId,
}

/// Negative log-likelihood of the whole map under a single posterior draw,
/// summed over non-ignored pixels, plus `beta`-weighted KL to the prior (a
/// standard normal for fixed-prior variants).
pub fn elbo_loss(
    model: &Model,
    tape: &mut Tape,
    x: TensorId,
    y: &SegMap,
    beta: f64,
    rng: &mut RngStream,
) -> Result<ElboTerms> {
    if !model.variant().is_latent() {
        return Err(Error::Variant { variant: model.variant().name(), detail: "no latent space".into() });
    }
    let q = model.density_nodes(tape, 0, DensityNet::Posterior, x, Some(y))?;
    let p = model.density_nodes(tape, 0, DensityNet::Prior, x, None)?;
    let z = q.sample(tape, rng)?;
    let logits = model.logits(tape, 0, x, Some(z), None)?;
    let mean = tape.cross_entropy_masked(logits, y, None)?;
    let valid = (0..y.len()).filter(|&i| !y.is_ignored(i)).count();
    let ce = tape.scale(mean, valid as f64);
    let kl = kl_diag_gaussian(tape, &q, &p)?;
    let weighted = tape.scale(kl, beta);
    let total = tape.add(ce, weighted)?;
    Ok(ElboTerms { total, ce, kl, z })
}

/// Head weights of the oracle loss: `1 − ε` on the smallest loss (lowest
/// index on ties) and `ε/(M−1)` elsewhere.
pub fn mheads_weights(losses: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    let m = losses.len();
    if m < 2 {
        return Err(Error::invalid("mheads_loss", format!("need at least 2 heads, got {m}")));
    }
    let best = (1..m).fold(0, |b, i| if losses[i] < losses[b] { i } else { b });
    let rest = epsilon / (m - 1) as f64;
    Ok((0..m).map(|i| if i == best { 1.0 - epsilon } else { rest }).collect())
}

/// Oracle loss over per-head logits. The best-head choice is not
/// differentiated.
pub fn mheads_loss(tape: &mut Tape, logits: &[TensorId], y: &SegMap, epsilon: f64) -> Result<TensorId> {
    if logits.len() < 2 {
        return Err(Error::invalid("mheads_loss", format!("need at least 2 heads, got {}", logits.len())));
    }
    let ces = logits.iter().map(|&l| tape.cross_entropy_masked(l, y, None)).collect::<Result<Vec<_>>>()?;
    let values: Vec<f64> = ces.iter().map(|&c| tape.scalar(c)).collect();
    let weights = mheads_weights(&values, epsilon)?;
    tape.weighted_sum(&ces, &weights)
}

/// Batch-mean losses of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    /// Zero-based index of the step just taken.
    pub step: u64,
    pub total: f64,
    pub ce: f64,
    pub kl: f64,
    pub lr: f64,
}

/// Forward, backward and Adam update on one batch for network `member`
/// (always 0 except for ensembles).
pub fn training_step(
    model: &mut Model,
    member: usize,
    batch: &[(Image, SegMap)],
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::invalid("training_step", "empty batch"));
    }
    if member >= model.networks().len() {
        return Err(Error::invalid("training_step", format!("no member {member}")));
    }
    let scale = 1.0 / batch.len() as f64;
    let step = model.store(member).step();
    let (mut total, mut ce_sum, mut kl_sum) = (0.0, 0.0, 0.0);
    for (image, y) in batch {
        let mut tape = Tape::new();
        let x = model.image_node(&mut tape, image)?;
        let (loss, ce, kl) = match model.variant() {
            v if v.is_latent() => {
                let t = elbo_loss(model, &mut tape, x, y, cfg.beta, rng)?;
                (t.total, tape.scalar(t.ce), tape.scalar(t.kl))
            }
            Variant::MHeads => {
                let heads = model.mheads_nodes(&mut tape, x)?;
                let l = mheads_loss(&mut tape, &heads, y, cfg.epsilon)?;
                (l, tape.scalar(l), 0.0)
            }
            _ => {
                let logits = model.logits(&mut tape, member, x, None, Some(rng))?;
                let l = tape.cross_entropy_masked(logits, y, None)?;
                (l, tape.scalar(l), 0.0)
            }
        };
        total += tape.scalar(loss);
        ce_sum += ce;
        kl_sum += kl;
        let scaled = tape.scale(loss, scale);
        tape.backward(scaled)?;
        tape.accumulate_param_grads(model.store_mut(member));
    }
    let adam = cfg.adam(step);
    model.store_mut(member).adam_step(&adam);
    Ok(StepMetrics { step, total: total * scale, ce: ce_sum * scale, kl: kl_sum * scale, lr: adam.lr })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig { lr: 1.0, lr_decay: vec![(10, 0.5), (20, 0.25)], ..TrainConfig::default() };
        assert_eq!(cfg.lr_at(0), 1.0);
        assert_eq!(cfg.lr_at(9), 1.0);
        assert_eq!(cfg.lr_at(10), 0.5);
        assert_eq!(cfg.lr_at(25), 0.25);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { beta: -1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { epsilon: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { steps: 0, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn oracle_weights() {
        let w = mheads_weights(&[2.0, 1.0, 1.0, 4.0], 0.3).unwrap();
        assert_eq!(w[1], 0.7);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(mheads_weights(&[1.0], 0.1).is_err());
    }
}
