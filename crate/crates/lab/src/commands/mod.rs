// SPDX-License-Identifier: Apache-2.0

mod compare;
mod evaluate;
mod generate;
mod grid;
mod train;

pub use compare::{ambiguity_report, cmd_compare, AmbiguityRow, CompareOptions, CompareSummary, WilcoxonRow};
pub use evaluate::{cmd_calibrate, cmd_eval, evaluate_model, CalibrationSummary, EvalOptions, EvalSummary, ImageEval};
pub use generate::{cmd_generate, GenerateSummary};
pub use grid::{cmd_latent_grid, GridOptions, GridSummary};
pub use train::{cmd_train, TrainOptions, TrainSummary};

use std::fs;
use std::path::{Path, PathBuf};

use probseg_core::metrics::{ged_mixture, ged_sampled, GedReport, IoUConvention};
use probseg_core::nets::Model;
use probseg_core::rng::mix64;
use probseg_core::synth::{apply_mode, enumerate_modes, FlipSpec, ModeTable};
use probseg_core::{RngStream, SegMap};

use crate::config::{ExperimentConfig, Task};
use crate::dataset::{dataset_files, read_dataset, Example, Split};
use crate::error::{LabError, Result};
use crate::formats::{apply_state, decode_checkpoint, read_file, write_file};
use crate::hash::{blob_hash, files_hash};

pub const CONFIG_FILE: &str = "config.txt";
pub const INPUTS_FILE: &str = "inputs.txt";
pub const MODES_FILE: &str = "modes.csv";

const EVAL_STREAM: u64 = 0x6576_616c;

/// Stream for the predictions on image `id`; independent of evaluation
/// order and thread count.
pub fn eval_rng(seed: u64, id: u64) -> RngStream {
    RngStream::new(seed, mix64(EVAL_STREAM ^ mix64(id)))
}

/// Create `out`, refusing to reuse a non-empty directory unless `force` is
/// set, in which case its previous contents are removed.
pub fn prepare_out(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let nonempty = fs::read_dir(out).map_err(|e| LabError::io(out, e))?.next().is_some();
        if nonempty {
            if !force {
                return Err(LabError::config(format!(
                    "output directory {} is not empty (use --force to overwrite)",
                    out.display()
                )));
            }
            fs::remove_dir_all(out).map_err(|e| LabError::io(out, e))?;
        }
    }
    fs::create_dir_all(out).map_err(|e| LabError::io(out, e))
}

/// A hashed input of a command.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Input {
    pub role: String,
    pub path: String,
    pub hash: String,
}

impl Input {
    pub fn config(path: Option<&Path>) -> Result<Input> {
        match path {
            Some(p) => Ok(Input {
                role: "config".into(),
                path: p.display().to_string(),
                hash: blob_hash(&read_file(p)?),
            }),
            None => Ok(Input { role: "config".into(), path: "(defaults)".into(), hash: blob_hash(b"") }),
        }
    }

    pub fn data(dir: &Path) -> Result<Input> {
        Ok(Input { role: "data".into(), path: dir.display().to_string(), hash: data_hash(dir)? })
    }

    pub fn model(dir: &Path) -> Result<Input> {
        Ok(Input { role: "model".into(), path: dir.display().to_string(), hash: model_hash(dir)? })
    }
}

/// Hash of a dataset: manifest, every file it lists, mode table and config.
pub fn data_hash(dir: &Path) -> Result<String> {
    let mut files = dataset_files(dir)?;
    files.push(CONFIG_FILE.into());
    if dir.join(MODES_FILE).exists() {
        files.push(MODES_FILE.into());
    }
    files_hash(dir, &files)
}

/// Hash of a trained model: its config and checkpoints.
pub fn model_hash(dir: &Path) -> Result<String> {
    let cfg = load_config(dir)?;
    let mut files = vec![CONFIG_FILE.to_string()];
    files.extend((0..cfg.arch.network_count()).map(|i| checkpoint_name(&cfg, i)));
    files_hash(dir, &files)
}

/// Echo the resolved config and the input hashes into `out`.
pub fn write_provenance(out: &Path, cfg: &ExperimentConfig, inputs: &[Input]) -> Result<()> {
    write_file(&out.join(CONFIG_FILE), cfg.to_kv().as_bytes())?;
    let mut text = String::new();
    for i in inputs {
        text.push_str(&format!("{} {} {}\n", i.hash, i.role, i.path));
    }
    write_file(&out.join(INPUTS_FILE), text.as_bytes())
}

pub fn load_config(dir: &Path) -> Result<ExperimentConfig> {
    let p = dir.join(CONFIG_FILE);
    if !p.exists() {
        return Err(LabError::data(&p, "missing config echo"));
    }
    ExperimentConfig::load(&p)?.resolve()
}

pub fn checkpoint_name(cfg: &ExperimentConfig, member: usize) -> String {
    if cfg.arch.network_count() == 1 {
        "checkpoint.pun".into()
    } else {
        format!("checkpoint.{member}.pun")
    }
}

pub fn state_name(cfg: &ExperimentConfig, member: usize) -> String {
    checkpoint_name(cfg, member).replace(".pun", ".pus")
}

/// Model and its resolved config from a training output directory,
/// optionally with optimizer state.
pub fn load_model(dir: &Path, with_state: bool) -> Result<(ExperimentConfig, Model)> {
    let cfg = load_config(dir)?;
    let mut stores = Vec::new();
    for i in 0..cfg.arch.network_count() {
        let p = dir.join(checkpoint_name(&cfg, i));
        if !p.exists() {
            return Err(LabError::data(&p, "missing checkpoint"));
        }
        let (arch, mut store) = decode_checkpoint(&read_file(&p)?, &p)?;
        cfg.check_arch(&arch)?;
        if with_state {
            let s = dir.join(state_name(&cfg, i));
            apply_state(&read_file(&s)?, &s, &mut store)?;
        }
        stores.push(store);
    }
    let model = Model::from_stores(cfg.arch.clone(), stores).map_err(|e| LabError::data(dir, e.to_string()))?;
    Ok((cfg, model))
}

/// A dataset directory with its echoed generation config.
#[derive(Clone, Debug)]
pub struct DataSource {
    pub dir: PathBuf,
    pub cfg: ExperimentConfig,
    pub spec: Option<FlipSpec>,
    pub table: Option<ModeTable>,
}

impl DataSource {
    pub fn open(dir: &Path) -> Result<DataSource> {
        let cfg = load_config(dir)?;
        let (spec, table) = match cfg.task {
            Task::Flips => {
                let spec = cfg.flip_spec()?;
                let table = enumerate_modes(&spec).map_err(|e| LabError::config(e.to_string()))?;
                (Some(spec), Some(table))
            }
            Task::Blobs => (None, None),
        };
        Ok(DataSource { dir: dir.to_path_buf(), cfg, spec, table })
    }

    pub fn split(&self, split: Split) -> Result<Vec<Example>> {
        let ex = read_dataset(&self.dir, Some(split))?;
        for e in &ex {
            let want = match self.cfg.task {
                Task::Flips => 1,
                Task::Blobs => probseg_core::synth::GRADERS,
            };
            if e.labels.len() != want {
                return Err(LabError::data(&self.dir, format!("example {} has {} label maps, expected {want}", e.id, e.labels.len())));
            }
        }
        Ok(ex)
    }

    /// The model must have been configured for this dataset.
    pub fn check_model(&self, cfg: &ExperimentConfig) -> Result<()> {
        if cfg.task != self.cfg.task || cfg.arch.num_classes != self.cfg.arch.num_classes {
            return Err(LabError::config(format!(
                "model is for task {} with {} classes, data is {} with {}",
                cfg.task.name(),
                cfg.arch.num_classes,
                self.cfg.task.name(),
                self.cfg.arch.num_classes
            )));
        }
        if (cfg.height, cfg.width) != (self.cfg.height, self.cfg.width) {
            return Err(LabError::config("model and data image extents differ"));
        }
        Ok(())
    }

    /// Ground-truth label maps of an example with their weights; flip
    /// scenes expand to every mode.
    pub fn ground_truth(&self, ex: &Example) -> Result<GroundTruth> {
        match (&self.spec, &self.table) {
            (Some(spec), Some(table)) => {
                let maps = table
                    .modes()
                    .iter()
                    .map(|m| apply_mode(&ex.labels[0], m.pattern, spec))
                    .collect::<probseg_core::Result<Vec<_>>>()?;
                Ok(GroundTruth::Mixture { maps, weights: table.weights() })
            }
            _ => Ok(GroundTruth::Samples(ex.labels.clone())),
        }
    }
}

#[derive(Clone, Debug)]
pub enum GroundTruth {
    Mixture { maps: Vec<SegMap>, weights: Vec<f64> },
    Samples(Vec<SegMap>),
}

impl GroundTruth {
    pub fn maps(&self) -> &[SegMap] {
        match self {
            GroundTruth::Mixture { maps, .. } | GroundTruth::Samples(maps) => maps,
        }
    }

    pub fn ged(&self, samples: &[SegMap], conv: &IoUConvention) -> Result<GedReport> {
        Ok(match self {
            GroundTruth::Mixture { maps, weights } => ged_mixture(samples, maps, weights, conv)?,
            GroundTruth::Samples(maps) => ged_sampled(samples, maps, conv)?,
        })
    }
}

/// Apply `f` to every item on up to `jobs` threads, preserving order.
pub fn par_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Result<Vec<R>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

/// Write CSV rows (header first) to `path`.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| LabError::data(path, e.to_string());
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(r).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| LabError::data(path, e.to_string()))?;
    write_file(path, &bytes)
}
