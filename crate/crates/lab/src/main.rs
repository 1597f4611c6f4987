// SPDX-License-Identifier: Apache-2.0

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use probseg::commands::{
    cmd_calibrate, cmd_compare, cmd_eval, cmd_generate, cmd_latent_grid, cmd_train, CompareOptions, EvalOptions,
    GridOptions, TrainOptions,
};
use probseg::{ExperimentConfig, LabError, Result};

#[derive(Parser)]
#[command(name = "probseg", version, about = "Probabilistic segmentation lab on synthetic ambiguous data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
    /// Worker threads for per-image work and ensemble members.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Render train/val/test splits of a synthetic task.
    Generate {
        /// key=value config file; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on the training split of a dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue the run stored in --out.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Per-image energy distance on the test split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated sample counts, e.g. 1,4,8,16.
        #[arg(long, value_delimiter = ',')]
        samples: Option<Vec<usize>>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Sampled mode frequencies against the analytic mode table.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Decode a grid over two whitened latent axes of one image.
    LatentGrid {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 2_000_000)]
        image_id: u64,
        /// Two latent axes, e.g. 0,1.
        #[arg(long, value_delimiter = ',', num_args = 2, default_values_t = [0, 1])]
        plane: Vec<usize>,
        #[arg(long, default_value_t = 19)]
        steps: usize,
        /// Half-width in prior standard deviations.
        #[arg(long, default_value_t = 3.0)]
        span: f64,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare models on one test split.
    Compare {
        /// Model directory; repeat for every model.
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',')]
        samples: Option<Vec<usize>>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
}

fn config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Generate { config: path, seed, common } => {
            let cfg = config(path.as_deref(), seed)?;
            let s = cmd_generate(&cfg, path.as_deref(), &common.out, common.force, common.jobs)?;
            Ok(format!("wrote {} examples to {}", s.rows.len(), common.out.display()))
        }
        Command::Train { config: path, data, seed, resume, common } => {
            let cfg = config(path.as_deref(), seed)?;
            let opts = TrainOptions { resume, force: common.force, jobs: common.jobs };
            let s = cmd_train(&cfg, path.as_deref(), &data, &common.out, &opts)?;
            let last = s.steps.iter().filter_map(|m| m.last()).map(|m| m.total).collect::<Vec<_>>();
            Ok(format!("trained {} to step {} in {:.1}s, final loss {:?}", s.config.variant().name(), s.config.steps, s.wall_seconds, last))
        }
        Command::Eval { model, data, samples, seed, common } => {
            let opts = EvalOptions { samples, seed, jobs: common.jobs, force: common.force };
            let s = cmd_eval(&model, &data, &common.out, &opts)?;
            let parts: Vec<String> = s.counts.iter().zip(&s.mean_d2).map(|(c, d)| format!("d2@{c}={d:.4}")).collect();
            Ok(parts.join(" "))
        }
        Command::Calibrate { model, data, seed, common } => {
            let opts = EvalOptions { samples: None, seed, jobs: common.jobs, force: common.force };
            let s = cmd_calibrate(&model, &data, &common.out, &opts)?;
            Ok(format!("max |freq - prob| = {:.4} over {} modes", s.max_deviation, s.sampled.len()))
        }
        Command::LatentGrid { model, data, image_id, plane, steps, span, force, out } => {
            let opts = GridOptions { image_id, plane: (plane[0], plane[1]), steps, span_sigma: span, force };
            let s = cmd_latent_grid(&model, &data, &out, &opts)?;
            Ok(format!("wrote {} grid maps and {} variant coordinates", s.files.len(), s.coordinates.len()))
        }
        Command::Compare { models, data, samples, seed, common } => {
            let opts = CompareOptions { samples, seed, jobs: common.jobs, force: common.force };
            let s = cmd_compare(&models, &data, &common.out, &opts)?;
            let mut lines = Vec::new();
            for (name, m) in s.names.iter().zip(&s.means) {
                let parts: Vec<String> = m.iter().map(|(c, d)| format!("d2@{c}={d:.4}")).collect();
                lines.push(format!("{name}: {}", parts.join(" ")));
            }
            for a in &s.ambiguity {
                lines.push(format!("{}: ambiguity accuracy {:.3} (majority {:.3})", a.model, a.test_accuracy, a.majority_rate));
            }
            Ok(lines.join("\n"))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &LabError) -> u8 {
    u8::try_from(e.exit_code()).unwrap_or(1)
}
