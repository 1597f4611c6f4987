// SPDX-License-Identifier: Apache-2.0

//! Flat `key=value` experiment configuration.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use num_rational::Ratio;
use probseg_core::metrics::IoUConvention;
use probseg_core::nets::{ArchConfig, Variant};
use probseg_core::objectives::TrainConfig;
use probseg_core::synth::{FlipSpec, Prob, SceneConfig, ToyLidcConfig};

use crate::error::{LabError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    /// Scenes whose classes flip to partner classes with fixed probabilities.
    Flips,
    /// Single lesions annotated by four graders who may disagree on presence.
    Blobs,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Flips => "flips",
            Task::Blobs => "blobs",
        }
    }
}

impl FromStr for Task {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Task> {
        match s {
            "flips" => Ok(Task::Flips),
            "blobs" => Ok(Task::Blobs),
            _ => Err(LabError::config(format!("unknown task `{s}` (flips|blobs)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvMode {
    /// Binary foreground IoU for blobs, class-averaged over flip classes for flips.
    Auto,
    Binary,
    Switchable,
}

/// Every setting of an experiment. `None` fields mean "derive from the task"
/// and are filled in by [`ExperimentConfig::resolve`].
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub task: Task,
    pub arch: ArchConfig,
    pub num_classes: Option<usize>,
    pub beta: f64,
    pub lr: f64,
    pub lr_decay_step: Option<u64>,
    pub lr_decay_factor: f64,
    pub steps: u64,
    pub batch: usize,
    pub weight_decay: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub samples: Vec<usize>,
    pub conv: ConvMode,
    pub eval_classes: Option<Vec<u8>>,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub flip_probs: Vec<Prob>,
    pub noise: f64,
    pub q: f64,
    pub val_every: u64,
    pub val_images: usize,
    /// Wall-clock limit for training in minutes; 0 disables it.
    pub budget_minutes: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: Task::Flips,
            arch: ArchConfig::default(),
            num_classes: None,
            beta: 1.0,
            lr: 1e-4,
            lr_decay_step: None,
            lr_decay_factor: 0.1,
            steps: 20_000,
            batch: 8,
            weight_decay: 1e-5,
            epsilon: 0.05,
            seed: 0,
            samples: vec![1, 4, 8, 16],
            conv: ConvMode::Auto,
            eval_classes: None,
            train_size: 600,
            val_size: 100,
            test_size: 200,
            height: None,
            width: None,
            flip_probs: vec![Ratio::new(8, 17), Ratio::new(7, 17), Ratio::new(6, 17)],
            noise: 0.05,
            q: 0.5,
            val_every: 1000,
            val_images: 16,
            budget_minutes: 0.0,
        }
    }
}

/// Keys accepted in config files, in echo order.
pub const KEYS: &[&str] = &[
    "task",
    "variant",
    "scales",
    "base_channels",
    "convs_per_block",
    "kernel",
    "latent_dim",
    "num_classes",
    "heads",
    "members",
    "dropout_p",
    "beta",
    "lr",
    "lr_decay_step",
    "lr_decay_factor",
    "steps",
    "batch",
    "weight_decay",
    "epsilon",
    "seed",
    "samples",
    "conv",
    "eval_classes",
    "train_size",
    "val_size",
    "test_size",
    "height",
    "width",
    "flip_probs",
    "noise",
    "q",
    "val_every",
    "val_images",
    "budget_minutes",
];

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| LabError::config(format!("bad value `{value}` for {key}")))
}

fn auto<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "auto" {
        Ok(None)
    } else {
        num(key, value).map(Some)
    }
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| num(key, v.trim())).collect()
}

fn parse_prob(key: &str, value: &str) -> Result<Prob> {
    let (n, d) = value.split_once('/').unwrap_or((value, "1"));
    let (n, d): (i128, i128) = (num(key, n.trim())?, num(key, d.trim())?);
    if d == 0 {
        return Err(LabError::config(format!("zero denominator in {key}")));
    }
    Ok(Ratio::new(n, d))
}

fn show_auto<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".into(), T::to_string)
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "task" => self.task = value.parse()?,
            "variant" => self.arch.variant = value.parse()?,
            "num_classes" => {
                self.num_classes = auto(key, value)?;
                if let Some(n) = self.num_classes {
                    self.arch.num_classes = n;
                }
            }
            "scales" | "base_channels" | "convs_per_block" | "kernel" | "latent_dim" | "heads" | "members"
            | "dropout_p" => self.arch.set(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "lr_decay_step" => self.lr_decay_step = auto(key, value)?,
            "lr_decay_factor" => self.lr_decay_factor = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "epsilon" => self.epsilon = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "samples" => self.samples = list(key, value)?,
            "conv" => {
                self.conv = match value {
                    "auto" => ConvMode::Auto,
                    "binary" => ConvMode::Binary,
                    "switchable" => ConvMode::Switchable,
                    _ => return Err(LabError::config(format!("bad conv `{value}` (auto|binary|switchable)"))),
                }
            }
            "eval_classes" => self.eval_classes = if value == "auto" { None } else { Some(list(key, value)?) },
            "train_size" => self.train_size = num(key, value)?,
            "val_size" => self.val_size = num(key, value)?,
            "test_size" => self.test_size = num(key, value)?,
            "height" => self.height = auto(key, value)?,
            "width" => self.width = auto(key, value)?,
            "flip_probs" => {
                self.flip_probs = value.split(',').map(|v| parse_prob(key, v.trim())).collect::<Result<_>>()?
            }
            "noise" => self.noise = num(key, value)?,
            "q" => self.q = num(key, value)?,
            "val_every" => self.val_every = num(key, value)?,
            "val_images" => self.val_images = num(key, value)?,
            "budget_minutes" => self.budget_minutes = num(key, value)?,
            _ => return Err(LabError::config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Apply `key=value` lines on top of the defaults. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| LabError::config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| match e {
                LabError::Config(m) => LabError::config(format!("line {}: {m}", n + 1)),
                LabError::Core(c) => LabError::config(format!("line {}: {c}", n + 1)),
                e => e,
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            LabError::Config(m) => LabError::config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Fill in task-derived values and check consistency.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = self.clone();
        let (h, w, classes) = match c.task {
            Task::Flips => (16, 32, 1 + 2 * c.flip_probs.len()),
            Task::Blobs => (16, 16, 2),
        };
        c.height.get_or_insert(h);
        c.width.get_or_insert(w);
        let classes = *c.num_classes.get_or_insert(classes);
        c.arch.num_classes = classes;
        c.arch.in_channels = 1;
        c.lr_decay_step.get_or_insert(c.steps * 3 / 4);
        if c.conv == ConvMode::Auto {
            c.conv = match c.task {
                Task::Flips => ConvMode::Switchable,
                Task::Blobs => ConvMode::Binary,
            };
        }
        if c.eval_classes.is_none() {
            c.eval_classes = Some(match c.conv {
                ConvMode::Binary => vec![1],
                _ => c.iou()?.eval_classes,
            });
        }
        c.validate()?;
        Ok(c)
    }

    fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.train_config().validate()?;
        let expected = match self.task {
            Task::Flips => self.flip_spec()?.num_classes(),
            Task::Blobs => 2,
        };
        if self.arch.num_classes != expected {
            return Err(LabError::config(format!(
                "num_classes {} does not match the {} task ({expected})",
                self.arch.num_classes,
                self.task.name()
            )));
        }
        if let (Some(h), Some(w)) = (self.height, self.width) {
            self.arch.check_extents(h, w).map_err(|e| LabError::config(e.to_string()))?;
        }
        if self.samples.is_empty() || self.samples.contains(&0) {
            return Err(LabError::config("samples must be a non-empty list of positive counts"));
        }
        if self.train_size == 0 || self.test_size == 0 {
            return Err(LabError::config("train_size and test_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.q) || !(self.noise >= 0.0) {
            return Err(LabError::config("q must lie in [0, 1] and noise be non-negative"));
        }
        if !(self.lr_decay_factor > 0.0) || !(self.budget_minutes >= 0.0) {
            return Err(LabError::config("lr_decay_factor must be positive and budget_minutes non-negative"));
        }
        self.iou()?;
        Ok(())
    }

    pub fn flip_spec(&self) -> Result<FlipSpec> {
        FlipSpec::consecutive(&self.flip_probs).map_err(|e| LabError::config(e.to_string()))
    }

    pub fn scene_config(&self) -> Result<SceneConfig> {
        Ok(SceneConfig {
            height: self.height.unwrap_or(16),
            width: self.width.unwrap_or(32),
            spec: self.flip_spec()?,
            noise_sigma: self.noise,
            ..SceneConfig::default()
        })
    }

    pub fn lidc_config(&self) -> ToyLidcConfig {
        ToyLidcConfig {
            height: self.height.unwrap_or(16),
            width: self.width.unwrap_or(16),
            q: self.q,
            noise_sigma: self.noise,
            ..ToyLidcConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let decay = self.lr_decay_step.unwrap_or(self.steps * 3 / 4);
        TrainConfig {
            beta: self.beta,
            lr: self.lr,
            lr_decay: vec![(decay, self.lr * self.lr_decay_factor)],
            steps: self.steps,
            batch: self.batch,
            weight_decay: self.weight_decay,
            epsilon: self.epsilon,
            seed: self.seed,
        }
    }

    pub fn iou(&self) -> Result<IoUConvention> {
        let binary = match self.conv {
            ConvMode::Auto => self.task == Task::Blobs,
            ConvMode::Binary => true,
            ConvMode::Switchable => false,
        };
        if binary {
            return Ok(IoUConvention::binary());
        }
        let classes = match &self.eval_classes {
            Some(c) => c.clone(),
            None => self.flip_spec()?.flip_pairs().iter().flat_map(|&(a, b)| [a, b]).collect(),
        };
        IoUConvention::switchable(classes).map_err(|e| LabError::config(e.to_string()))
    }

    /// Variant, task and shape all agree with a checkpoint's architecture.
    pub fn check_arch(&self, arch: &ArchConfig) -> Result<()> {
        let mine = ArchConfig { in_channels: arch.in_channels, ..self.arch.clone() };
        if &mine != arch {
            return Err(LabError::config(format!(
                "model architecture does not match the config:\n{}versus\n{}",
                arch.to_kv(),
                mine.to_kv()
            )));
        }
        Ok(())
    }

    /// One `key=value` line per key, in [`KEYS`] order.
    pub fn to_kv(&self) -> String {
        let a = &self.arch;
        let conv = match self.conv {
            ConvMode::Auto => "auto",
            ConvMode::Binary => "binary",
            ConvMode::Switchable => "switchable",
        };
        let probs: Vec<String> = self.flip_probs.iter().map(|p| format!("{}/{}", p.numer(), p.denom())).collect();
        let values: Vec<String> = vec![
            self.task.name().into(),
            a.variant.name().into(),
            a.scales.to_string(),
            a.base_channels.to_string(),
            a.convs_per_block.to_string(),
            a.kernel.to_string(),
            a.latent_dim.to_string(),
            show_auto(&self.num_classes),
            a.heads.to_string(),
            a.members.to_string(),
            a.dropout_p.to_string(),
            self.beta.to_string(),
            self.lr.to_string(),
            show_auto(&self.lr_decay_step),
            self.lr_decay_factor.to_string(),
            self.steps.to_string(),
            self.batch.to_string(),
            self.weight_decay.to_string(),
            self.epsilon.to_string(),
            self.seed.to_string(),
            join(&self.samples),
            conv.into(),
            self.eval_classes.as_ref().map_or_else(|| "auto".into(), |c| join(c)),
            self.train_size.to_string(),
            self.val_size.to_string(),
            self.test_size.to_string(),
            show_auto(&self.height),
            show_auto(&self.width),
            probs.join(","),
            self.noise.to_string(),
            self.q.to_string(),
            self.val_every.to_string(),
            self.val_images.to_string(),
            self.budget_minutes.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            writeln!(out, "{k}={v}").unwrap();
        }
        out
    }

    pub fn is_latent(&self) -> bool {
        self.arch.variant.is_latent()
    }

    pub fn variant(&self) -> Variant {
        self.arch.variant
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut c = ExperimentConfig::parse("task=blobs\nvariant=m_heads\nheads=8\nsamples=1,8\n# note\n\nlr=0.0005").unwrap();
        c.seed = 9;
        let text = c.to_kv();
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), c);
        let r = c.resolve().unwrap();
        assert_eq!(ExperimentConfig::parse(&r.to_kv()).unwrap(), r);
        assert_eq!(r.arch.num_classes, 2);
        assert_eq!(r.conv, ConvMode::Binary);
        assert!(!r.to_kv().contains("auto"));
    }

    #[test]
    fn every_key_is_echoed_once() {
        let text = ExperimentConfig::default().to_kv();
        assert_eq!(text.lines().count(), KEYS.len());
        for k in KEYS {
            assert!(text.lines().any(|l| l.starts_with(&format!("{k}="))), "{k}");
        }
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        for text in ["colour=red", "steps=many", "task=cars", "variant=gan", "noequals"] {
            let e = ExperimentConfig::parse(text).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{text}: {e}");
            assert!(e.to_string().contains("line 1"), "{e}");
        }
    }

    #[test]
    fn flips_defaults_resolve() {
        let r = ExperimentConfig::default().resolve().unwrap();
        assert_eq!(r.arch.num_classes, 7);
        assert_eq!((r.height, r.width), (Some(16), Some(32)));
        assert_eq!(r.eval_classes, Some(vec![1, 4, 2, 5, 3, 6]));
        assert_eq!(r.lr_decay_step, Some(15_000));
    }

    #[test]
    fn inconsistent_settings_are_rejected() {
        assert!(ExperimentConfig::parse("num_classes=3").unwrap().resolve().is_err());
        assert!(ExperimentConfig::parse("height=12").unwrap().resolve().is_err());
        assert!(ExperimentConfig::parse("samples=0").unwrap().resolve().is_err());
    }
}
