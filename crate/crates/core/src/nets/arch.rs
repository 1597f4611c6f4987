// SPDX-License-Identifier: Apache-2.0

use alloc::format;
use alloc::string::String;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    ProbUnet,
    DropoutUnet,
    Ensemble,
    MHeads,
    I2iVae,
    AblateFixedPrior,
    AblateFixedPriorMaskOnlyPosterior,
    AblateEarlyInjection,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::ProbUnet,
        Variant::DropoutUnet,
        Variant::Ensemble,
        Variant::MHeads,
        Variant::I2iVae,
        Variant::AblateFixedPrior,
        Variant::AblateFixedPriorMaskOnlyPosterior,
        Variant::AblateEarlyInjection,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::ProbUnet => "prob_unet",
            Variant::DropoutUnet => "dropout_unet",
            Variant::Ensemble => "ensemble",
            Variant::MHeads => "m_heads",
            Variant::I2iVae => "i2i_vae",
            Variant::AblateFixedPrior => "ablate_fixed_prior",
            Variant::AblateFixedPriorMaskOnlyPosterior => "ablate_fixed_prior_mask_only_posterior",
            Variant::AblateEarlyInjection => "ablate_early_injection",
        }
    }

    /// Has a latent variable with a prior and a posterior.
    pub fn is_latent(self) -> bool {
        matches!(
            self,
            Variant::ProbUnet
                | Variant::I2iVae
                | Variant::AblateFixedPrior
                | Variant::AblateFixedPriorMaskOnlyPosterior
                | Variant::AblateEarlyInjection
        )
    }

    /// Latent concatenated to the decoder output, in front of the 1×1 head.
    pub fn late_injection(self) -> bool {
        matches!(self, Variant::ProbUnet | Variant::AblateFixedPrior | Variant::AblateFixedPriorMaskOnlyPosterior)
    }

    /// Latent concatenated to the image at the first encoder block.
    pub fn early_injection(self) -> bool {
        matches!(self, Variant::I2iVae | Variant::AblateEarlyInjection)
    }

    pub fn learned_prior(self) -> bool {
        matches!(self, Variant::ProbUnet | Variant::AblateEarlyInjection)
    }

    /// Posterior sees the image as well as the mask.
    pub fn posterior_sees_image(self) -> bool {
        matches!(self, Variant::ProbUnet | Variant::AblateFixedPrior | Variant::AblateEarlyInjection)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// Network shape shared by every variant.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub variant: Variant,
    /// Image channels.
    pub in_channels: usize,
    pub num_classes: usize,
    /// Number of down/up-sampling steps.
    pub scales: usize,
    pub base_channels: usize,
    pub convs_per_block: usize,
    pub kernel: usize,
    pub latent_dim: usize,
    pub heads: usize,
    pub dropout_p: f64,
    pub members: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            variant: Variant::ProbUnet,
            in_channels: 1,
            num_classes: 7,
            scales: 3,
            base_channels: 8,
            convs_per_block: 3,
            kernel: 3,
            latent_dim: 6,
            heads: 4,
            dropout_p: 0.5,
            members: 4,
        }
    }
}

const KEYS: [&str; 11] = [
    "variant",
    "in_channels",
    "num_classes",
    "scales",
    "base_channels",
    "convs_per_block",
    "kernel",
    "latent_dim",
    "heads",
    "dropout_p",
    "members",
];

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.scales < 1 {
            return bad("scales must be at least 1".into());
        }
        if self.base_channels < 1 || self.latent_dim < 1 || self.in_channels < 1 || self.convs_per_block < 1 {
            return bad("base_channels, latent_dim, in_channels and convs_per_block must be positive".into());
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return bad(format!("num_classes {} outside [2, 255]", self.num_classes));
        }
        if self.kernel.is_multiple_of(2) {
            return bad(format!("kernel {} must be odd", self.kernel));
        }
        if self.variant == Variant::MHeads && self.heads < 2 {
            return bad(format!("m_heads needs at least 2 heads, got {}", self.heads));
        }
        if self.variant == Variant::Ensemble && self.members < 1 {
            return bad("ensemble needs at least one member".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        Ok(())
    }

    /// Number of independently parameterized networks.
    pub fn network_count(&self) -> usize {
        if self.variant == Variant::Ensemble {
            self.members
        } else {
            1
        }
    }

    /// Channels at encoder level `l`.
    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial extents must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << self.scales
    }

    pub fn check_extents(&self, height: usize, width: usize) -> Result<()> {
        let d = self.divisor();
        if height == 0 || width == 0 || !height.is_multiple_of(d) || !width.is_multiple_of(d) {
            return Err(Error::shape("unet", format!("{height}x{width} not divisible by {d}")));
        }
        Ok(())
    }

    /// One `key=value` per line, fixed key order.
    pub fn to_kv(&self) -> String {
        format!(
            "variant={}\nin_channels={}\nnum_classes={}\nscales={}\nbase_channels={}\nconvs_per_block={}\nkernel={}\nlatent_dim={}\nheads={}\ndropout_p={}\nmembers={}\n",
            self.variant,
            self.in_channels,
            self.num_classes,
            self.scales,
            self.base_channels,
            self.convs_per_block,
            self.kernel,
            self.latent_dim,
            self.heads,
            self.dropout_p,
            self.members
        )
    }

    /// Parse text written by [`ArchConfig::to_kv`]. Missing keys keep their
    /// defaults; unknown keys are rejected.
    pub fn from_kv(text: &str) -> Result<ArchConfig> {
        let mut cfg = ArchConfig::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("expected key=value, got `{line}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn keys() -> &'static [&'static str] {
        &KEYS
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| Error::Config(format!("bad value `{value}` for {key}")))
        }
        match key {
            "variant" => self.variant = value.parse()?,
            "in_channels" => self.in_channels = num(key, value)?,
            "num_classes" => self.num_classes = num(key, value)?,
            "scales" => self.scales = num(key, value)?,
            "base_channels" => self.base_channels = num(key, value)?,
            "convs_per_block" => self.convs_per_block = num(key, value)?,
            "kernel" => self.kernel = num(key, value)?,
            "latent_dim" => self.latent_dim = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "dropout_p" => self.dropout_p = num(key, value)?,
            "members" => self.members = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }
}

impl fmt::Display for ArchConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_kv())
    }
}
