// SPDX-License-Identifier: Apache-2.0

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    /// Prior net.
    Prior,
    /// Shared U-Net trunk.
    Unet,
    /// Latent combination head.
    Combine,
    /// Posterior net.
    Posterior,
    /// Output heads of the deterministic and multi-head baselines.
    Head,
}

impl ParamGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Prior => "prior",
            ParamGroup::Unet => "unet",
            ParamGroup::Combine => "comb",
            ParamGroup::Posterior => "posterior",
            ParamGroup::Head => "head",
        }
    }

    pub fn from_name(name: &str) -> Option<ParamGroup> {
        let prefix = name.split('/').next()?;
        [ParamGroup::Prior, ParamGroup::Unet, ParamGroup::Combine, ParamGroup::Posterior, ParamGroup::Head]
            .into_iter()
            .find(|g| g.as_str() == prefix)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    /// Adam first-moment accumulator.
    pub m: Vec<f64>,
    /// Adam second-moment accumulator.
    pub v: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Named trainable tensors with their optimizer state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, ParamId>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, group: ParamGroup, shape: &[usize], value: Vec<f64>) -> Result<ParamId> {
        let numel: usize = shape.iter().product();
        if value.len() != numel {
            return Err(Error::shape("ParamStore::register", format!("{name}: {} values for {numel}", value.len())));
        }
        if self.index.contains_key(name) {
            return Err(Error::invalid("ParamStore::register", format!("duplicate parameter {name}")));
        }
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.into(),
            group,
            shape: shape.to_vec(),
            grad: vec![0.0; numel],
            m: vec![0.0; numel],
            v: vec![0.0; numel],
            value,
        });
        self.index.insert(name.into(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Number of scalar weights, optionally restricted to one group.
    pub fn numel(&self, group: Option<ParamGroup>) -> usize {
        self.params.iter().filter(|p| group.is_none_or(|g| p.group == g)).map(|p| p.value.len()).sum()
    }

    /// Adam steps taken so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Bias-corrected Adam update with decoupled weight decay; clears
    /// gradients afterwards.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - libm::pow(cfg.beta1, t);
        let c2 = 1.0 - libm::pow(cfg.beta2, t);
        for p in &mut self.params {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g;
                p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = p.m[i] / c1;
                let v_hat = p.v[i] / c2;
                p.value[i] -= cfg.lr * (m_hat / (libm::sqrt(v_hat) + cfg.eps) + cfg.weight_decay * p.value[i]);
                p.grad[i] = 0.0;
            }
        }
    }
}
