// SPDX-License-Identifier: Apache-2.0

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use probseg_core::diff::ParamStore;
use probseg_core::nets::{ArchConfig, Model};
use probseg_core::objectives::{training_step, StepMetrics};
use probseg_core::rng::mix64;
use probseg_core::synth::{apply_mode, GRADERS};
use probseg_core::{Image, RngStream, SegMap};

use super::{
    checkpoint_name, eval_rng, load_model, par_map, prepare_out, state_name, write_provenance, DataSource, Input,
    CONFIG_FILE,
};
use crate::config::{ExperimentConfig, Task};
use crate::dataset::{Example, Split};
use crate::error::{LabError, Result};
use crate::formats::{encode_checkpoint, encode_state, write_file};

const TRAIN_STREAM: u64 = 0x74_7261_696e;
pub const LOG_COLUMNS: &str = "step,total,ce,kl,lr,wall_ms";
pub const VAL_COLUMNS: &str = "step,n_samples,mean_d2";
/// Sample count of the periodic validation GED.
pub const VAL_SAMPLES: usize = 4;

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from the checkpoint and optimizer state in the output directory.
    pub resume: bool,
    pub force: bool,
    /// Ensemble members trained concurrently.
    pub jobs: usize,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub config: ExperimentConfig,
    /// Metrics of every step taken in this invocation, per network.
    pub steps: Vec<Vec<StepMetrics>>,
    pub validation: Vec<(u64, f64)>,
    pub wall_seconds: f64,
}

pub fn log_name(cfg: &ExperimentConfig, member: usize) -> String {
    checkpoint_name(cfg, member).replace("checkpoint", "train_log").replace(".pun", ".csv")
}

/// Stream for step `step` of network `member`: batch composition, mode
/// draws, latent noise and dropout masks all come from here.
fn step_rng(seed: u64, member: usize, step: u64) -> RngStream {
    RngStream::new(seed, mix64(TRAIN_STREAM ^ mix64(member as u64))).derive(step)
}

fn draw_batch(data: &DataSource, train: &[Example], batch: usize, rng: &mut RngStream) -> Result<Vec<(Image, SegMap)>> {
    (0..batch)
        .map(|_| {
            let ex = &train[rng.below(train.len() as u64) as usize];
            match (&data.spec, &data.table) {
                (Some(spec), Some(table)) => {
                    let j = rng.categorical(&table.weights());
                    Ok((ex.image.clone(), apply_mode(&ex.labels[0], table.modes()[j].pattern, spec)?))
                }
                _ => Ok((ex.image.clone(), ex.labels[rng.below(GRADERS as u64) as usize].clone())),
            }
        })
        .collect()
}

fn append(path: &Path, lines: &str) -> Result<()> {
    let mut f = OpenOptions::new().append(true).create(true).open(path).map_err(|e| LabError::io(path, e))?;
    f.write_all(lines.as_bytes()).map_err(|e| LabError::io(path, e))
}

/// Mean d2 over the first validation images.
fn validate(model: &Model, data: &DataSource, val: &[Example], cfg: &ExperimentConfig) -> Result<f64> {
    let n = model.max_samples().map_or(VAL_SAMPLES, |m| m.min(VAL_SAMPLES));
    let conv = cfg.iou()?;
    let mut total = 0.0;
    for ex in val {
        let samples = model.predict(&ex.image, n, &mut eval_rng(cfg.seed, ex.id))?;
        total += data.ground_truth(ex)?.ged(&samples, &conv)?.d2;
    }
    Ok(total / val.len() as f64)
}

struct Budget {
    start: Instant,
    limit: Option<f64>,
}

impl Budget {
    fn exceeded(&self) -> bool {
        self.limit.is_some_and(|l| self.start.elapsed().as_secs_f64() > l)
    }
}

/// Step metrics, validation rows, and whether the budget stopped training.
type NetworkRun = (Vec<StepMetrics>, Vec<(u64, f64)>, bool);

/// Train one network in place. `model` holds just that network; `member`
/// selects its random stream and file names. Returns per-step metrics and
/// validation rows; `val` is empty for ensemble members.
#[allow(clippy::too_many_arguments)]
fn train_network(
    model: &mut Model,
    member: usize,
    cfg: &ExperimentConfig,
    data: &DataSource,
    train: &[Example],
    val: &[Example],
    out: &Path,
    budget: &Budget,
) -> Result<NetworkRun> {
    let tc = cfg.train_config();
    let log = out.join(log_name(cfg, member));
    let val_log = out.join("val_log.csv");
    let start = model.store(0).step();
    let clock = Instant::now();
    let mut metrics = Vec::new();
    let mut validation = Vec::new();
    let mut lines = String::new();
    let mut stopped = false;
    for step in start..tc.steps {
        let mut rng = step_rng(cfg.seed, member, step);
        let batch = draw_batch(data, train, tc.batch, &mut rng)?;
        let m = training_step(model, 0, &batch, &tc, &mut rng)?;
        lines.push_str(&format!("{},{},{},{},{},{}\n", m.step, m.total, m.ce, m.kl, m.lr, clock.elapsed().as_millis()));
        metrics.push(m);
        let done = step + 1;
        if !val.is_empty() && cfg.val_every > 0 && done % cfg.val_every == 0 {
            let d2 = validate(model, data, val, cfg)?;
            append(&val_log, &format!("{done},{},{d2}\n", model.max_samples().map_or(VAL_SAMPLES, |m| m.min(VAL_SAMPLES))))?;
            validation.push((done, d2));
        }
        if lines.len() > 1 << 16 {
            append(&log, &std::mem::take(&mut lines))?;
        }
        if budget.exceeded() && done < tc.steps {
            stopped = true;
            break;
        }
    }
    append(&log, &lines)?;
    Ok((metrics, validation, stopped))
}

fn save(out: &Path, cfg: &ExperimentConfig, member: usize, arch: &ArchConfig, store: &ParamStore) -> Result<()> {
    write_file(&out.join(checkpoint_name(cfg, member)), &encode_checkpoint(arch, store))?;
    write_file(&out.join(state_name(cfg, member)), &encode_state(store))
}

/// Train the configured variant on the training split of `data_dir`.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    config_path: Option<&Path>,
    data_dir: &Path,
    out: &Path,
    opts: &TrainOptions,
) -> Result<TrainSummary> {
    let mut cfg = cfg.clone();
    if opts.resume && cfg.lr_decay_step.is_none() {
        // Keep the schedule of the original run when only `steps` grew.
        cfg.lr_decay_step = super::load_config(out)?.lr_decay_step;
    }
    let cfg = cfg.resolve()?;
    let data = DataSource::open(data_dir)?;
    data.check_model(&cfg)?;
    if cfg.task == Task::Flips && cfg.flip_probs != data.cfg.flip_probs {
        return Err(LabError::config("flip probabilities differ from the dataset's"));
    }
    let inputs = [Input::config(config_path)?, Input::data(data_dir)?];
    let model = if opts.resume {
        let (saved, model) = load_model(out, true)?;
        if saved.arch != cfg.arch || saved.seed != cfg.seed || saved.task != cfg.task {
            return Err(LabError::config("resume config differs from the saved run in architecture, task or seed"));
        }
        if model.networks().iter().any(|n| n.store().step() > cfg.steps) {
            return Err(LabError::config("checkpoint is already past the configured step count"));
        }
        model
    } else {
        prepare_out(out, opts.force)?;
        Model::new(cfg.arch.clone(), cfg.seed)?
    };
    let train = data.split(Split::Train)?;
    if train.is_empty() {
        return Err(LabError::data(data_dir, "training split is empty"));
    }
    let val: Vec<Example> = data.split(Split::Val)?.into_iter().take(cfg.val_images).collect();
    write_provenance(out, &cfg, &inputs)?;
    let fresh = |p: &Path| -> Result<()> {
        if !opts.resume || !p.exists() {
            write_file(p, format!("{}\n", if p.ends_with("val_log.csv") { VAL_COLUMNS } else { LOG_COLUMNS }).as_bytes())?;
        }
        Ok(())
    };
    let n = cfg.arch.network_count();
    for i in 0..n {
        fresh(&out.join(log_name(&cfg, i)))?;
    }
    fresh(&out.join("val_log.csv"))?;
    let budget = Budget {
        start: Instant::now(),
        limit: (cfg.budget_minutes > 0.0).then_some(cfg.budget_minutes * 60.0),
    };
    let arch = cfg.arch.clone();
    let clock = Instant::now();
    let (steps, mut validation, stopped, stores) = if n == 1 {
        let mut model = model;
        let (m, v, s) = train_network(&mut model, 0, &cfg, &data, &train, &val, out, &budget)?;
        (vec![m], v, s, vec![model.store(0).clone()])
    } else {
        // Members are independent networks; each trains as a one-member model.
        let single = ArchConfig { members: 1, ..arch.clone() };
        let members: Vec<(usize, ParamStore)> = model.networks().iter().map(|n| n.store().clone()).enumerate().collect();
        let results = par_map(&members, opts.jobs, |(i, store)| {
            let mut m = Model::from_stores(single.clone(), vec![store.clone()])?;
            let (metrics, _, stopped) = train_network(&mut m, *i, &cfg, &data, &train, &[], out, &budget)?;
            Ok((metrics, stopped, m.store(0).clone()))
        })?;
        let stopped = results.iter().any(|r| r.1);
        let steps = results.iter().map(|r| r.0.clone()).collect();
        let stores: Vec<ParamStore> = results.into_iter().map(|r| r.2).collect();
        (steps, Vec::new(), stopped, stores)
    };
    for (i, store) in stores.iter().enumerate() {
        save(out, &cfg, i, &arch, store)?;
    }
    if stopped {
        return Err(LabError::Budget(format!(
            "stopped after {:.1} minutes; resume with --resume",
            budget.start.elapsed().as_secs_f64() / 60.0
        )));
    }
    if n > 1 && !val.is_empty() {
        let model = Model::from_stores(arch, stores)?;
        let d2 = validate(&model, &data, &val, &cfg)?;
        let count = model.max_samples().map_or(VAL_SAMPLES, |m| m.min(VAL_SAMPLES));
        append(&out.join("val_log.csv"), &format!("{},{count},{d2}\n", cfg.steps))?;
        validation.push((cfg.steps, d2));
    }
    debug_assert!(out.join(CONFIG_FILE).exists());
    Ok(TrainSummary { config: cfg, steps, validation, wall_seconds: clock.elapsed().as_secs_f64() })
}
