// SPDX-License-Identifier: Apache-2.0

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::diff::{Tape, TensorId};
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Log-sigma bounds applied by the density nets.
pub const LOG_SIGMA_CLAMP: f64 = 10.0;

/// Axis-aligned Gaussian over the latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    mu: Vec<f64>,
    log_sigma: Vec<f64>,
}

impl GaussianParams {
    pub fn new(mu: Vec<f64>, log_sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != log_sigma.len() || mu.is_empty() {
            return Err(Error::shape("GaussianParams", format!("mu {} vs log_sigma {}", mu.len(), log_sigma.len())));
        }
        if mu.iter().any(|v| !v.is_finite()) || log_sigma.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::invalid("GaussianParams", "non-finite parameters"));
        }
        Ok(GaussianParams { mu, log_sigma })
    }

    /// From standard deviations. A zero entry gives a point mass on that axis.
    pub fn from_sigma(mu: Vec<f64>, sigma: &[f64]) -> Result<Self> {
        if sigma.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::invalid("GaussianParams", "negative sigma"));
        }
        Self::new(mu, sigma.iter().map(|s| libm::log(*s)).collect())
    }

    pub fn standard(dim: usize) -> Self {
        GaussianParams { mu: vec![0.0; dim], log_sigma: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn log_sigma(&self) -> &[f64] {
        &self.log_sigma
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.log_sigma.iter().map(|l| libm::exp(*l)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentSource {
    Prior,
    Posterior,
    Grid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample {
    pub z: Vec<f64>,
    pub source: LatentSource,
}

/// `mu + sigma * eps` with one standard normal per component.
pub fn sample_latent(g: &GaussianParams, source: LatentSource, rng: &mut RngStream) -> LatentSample {
    let eps: Vec<f64> = (0..g.dim()).map(|_| rng.normal()).collect();
    LatentSample { z: combine(g, &eps), source }
}

pub(crate) fn combine(g: &GaussianParams, eps: &[f64]) -> Vec<f64> {
    g.mu.iter().zip(g.sigma()).zip(eps).map(|((m, s), e)| m + s * e).collect()
}

/// A Gaussian living on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GaussianNodes {
    pub mu: TensorId,
    pub log_sigma: TensorId,
}

impl GaussianNodes {
    pub fn constant(tape: &mut Tape, g: &GaussianParams) -> Result<GaussianNodes> {
        let n = g.dim();
        Ok(GaussianNodes { mu: tape.constant(&[n], g.mu.clone())?, log_sigma: tape.constant(&[n], g.log_sigma.clone())? })
    }

    pub fn values(&self, tape: &Tape) -> GaussianParams {
        GaussianParams { mu: tape.value(self.mu).to_vec(), log_sigma: tape.value(self.log_sigma).to_vec() }
    }

    /// Differentiable draw `mu + exp(log_sigma) * eps`.
    pub fn reparameterize(&self, tape: &mut Tape, eps: &[f64]) -> Result<TensorId> {
        let sigma = tape.exp(self.log_sigma);
        let e = tape.constant(&[eps.len()], eps.to_vec())?;
        let scaled = tape.mul(sigma, e)?;
        tape.add(self.mu, scaled)
    }

    pub fn sample(&self, tape: &mut Tape, rng: &mut RngStream) -> Result<TensorId> {
        let eps: Vec<f64> = (0..tape.value(self.mu).len()).map(|_| rng.normal()).collect();
        self.reparameterize(tape, &eps)
    }
}
