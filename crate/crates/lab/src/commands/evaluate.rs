// SPDX-License-Identifier: Apache-2.0

use std::path::Path;

use probseg_core::metrics::{closest_mode_frequencies, pixel_marginals, GedReport};
use probseg_core::nets::Model;
use probseg_core::synth::to_f64;
use probseg_core::SegMap;

use super::{eval_rng, load_model, par_map, prepare_out, write_csv, write_provenance, DataSource, Input};
use crate::config::{ExperimentConfig, Task};
use crate::dataset::{Example, Split};
use crate::error::{LabError, Result};
use crate::formats::write_file;
use crate::svg::{Plot, Scale, Series};

pub const EVAL_COLUMNS: [&str; 6] = ["image_id", "n_samples", "cross", "pred_div", "gt_div", "d2"];
/// Samples per test image for calibration and presence counting.
pub const CALIBRATION_SAMPLES: usize = 16;

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    /// Overrides the sample counts of the model's config.
    pub samples: Option<Vec<usize>>,
    /// Overrides the seed of the model's config.
    pub seed: Option<u64>,
    pub jobs: usize,
    pub force: bool,
}

/// Reports of one image, one per requested sample count, plus the samples
/// themselves (as many as the largest count).
#[derive(Clone, Debug)]
pub struct ImageEval {
    pub id: u64,
    pub reports: Vec<GedReport>,
    pub samples: Vec<SegMap>,
}

#[derive(Clone, Debug)]
pub struct EvalSummary {
    pub config: ExperimentConfig,
    pub counts: Vec<usize>,
    pub images: Vec<ImageEval>,
    /// Mean d2 per sample count.
    pub mean_d2: Vec<f64>,
}

impl EvalSummary {
    pub fn mean_at(&self, count: usize) -> Option<f64> {
        self.counts.iter().position(|&c| c == count).map(|i| self.mean_d2[i])
    }

    /// Per-image d2 at `count`, in image order.
    pub fn d2_at(&self, count: usize) -> Option<Vec<f64>> {
        let i = self.counts.iter().position(|&c| c == count)?;
        Some(self.images.iter().map(|e| e.reports[i].d2).collect())
    }
}

pub fn check_counts(model: &Model, counts: &[usize]) -> Result<()> {
    if counts.is_empty() || counts.contains(&0) {
        return Err(LabError::config("sample counts must be positive"));
    }
    if let Some(limit) = model.max_samples() {
        if let Some(c) = counts.iter().find(|&&c| c > limit) {
            return Err(LabError::config(format!(
                "{} can produce at most {limit} samples, {c} requested",
                model.variant().name()
            )));
        }
    }
    Ok(())
}

/// Draw `max(counts)` samples per example and score every prefix of the
/// requested lengths.
pub fn evaluate_model(
    model: &Model,
    cfg: &ExperimentConfig,
    data: &DataSource,
    examples: &[Example],
    counts: &[usize],
    seed: u64,
    jobs: usize,
) -> Result<Vec<ImageEval>> {
    check_counts(model, counts)?;
    let conv = cfg.iou()?;
    let most = *counts.iter().max().expect("non-empty");
    par_map(examples, jobs, |ex| {
        let samples = model.predict(&ex.image, most, &mut eval_rng(seed, ex.id))?;
        let gt = data.ground_truth(ex)?;
        let reports = counts.iter().map(|&c| gt.ged(&samples[..c], &conv)).collect::<Result<Vec<_>>>()?;
        Ok(ImageEval { id: ex.id, reports, samples })
    })
}

fn report_row(id: &str, count: usize, r: &GedReport) -> Vec<String> {
    vec![id.into(), count.to_string(), r.cross.to_string(), r.pred_div.to_string(), r.gt_div.to_string(), r.d2.to_string()]
}

fn open(model_dir: &Path, data_dir: &Path) -> Result<(ExperimentConfig, Model, DataSource)> {
    let (cfg, model) = load_model(model_dir, false)?;
    let data = DataSource::open(data_dir)?;
    data.check_model(&cfg)?;
    Ok((cfg, model, data))
}

/// Per-image generalized energy distance on the test split at every
/// sample count, followed by one mean row per count.
pub fn cmd_eval(model_dir: &Path, data_dir: &Path, out: &Path, opts: &EvalOptions) -> Result<EvalSummary> {
    let (mut cfg, model, data) = open(model_dir, data_dir)?;
    if let Some(s) = &opts.samples {
        cfg.samples = s.clone();
    }
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    check_counts(&model, &cfg.samples)?;
    let inputs = [Input::model(model_dir)?, Input::data(data_dir)?];
    let test = data.split(Split::Test)?;
    if test.is_empty() {
        return Err(LabError::data(data_dir, "test split is empty"));
    }
    prepare_out(out, opts.force)?;
    let images = evaluate_model(&model, &cfg, &data, &test, &cfg.samples, cfg.seed, opts.jobs)?;
    let mut rows = Vec::new();
    for img in &images {
        for (c, r) in cfg.samples.iter().zip(&img.reports) {
            rows.push(report_row(&img.id.to_string(), *c, r));
        }
    }
    let n = images.len() as f64;
    let mut mean_d2 = Vec::new();
    for (i, &c) in cfg.samples.iter().enumerate() {
        let mean = |f: fn(&GedReport) -> f64| images.iter().map(|e| f(&e.reports[i])).sum::<f64>() / n;
        let r = GedReport {
            cross: mean(|r| r.cross),
            pred_div: mean(|r| r.pred_div),
            gt_div: mean(|r| r.gt_div),
            d2: mean(|r| r.d2),
            n: c,
            m: images[0].reports[i].m,
        };
        rows.push(report_row("mean", c, &r));
        mean_d2.push(r.d2);
    }
    write_csv(&out.join("eval.csv"), &EVAL_COLUMNS, &rows)?;
    write_provenance(out, &cfg, &inputs)?;
    Ok(EvalSummary { config: cfg.clone(), counts: cfg.samples.clone(), images, mean_d2 })
}

#[derive(Clone, Debug)]
pub struct CalibrationSummary {
    pub samples_per_image: usize,
    pub ground_truth: Vec<f64>,
    pub sampled: Vec<f64>,
    /// Largest `|sampled_j − ω_j|`.
    pub max_deviation: f64,
    /// Per flip pair: analytic probability and sampled pixel fraction.
    pub marginals: Vec<(f64, Option<f64>)>,
}

/// Closest-mode frequencies and pixel marginals of the given samples.
pub fn calibration(data: &DataSource, examples: &[Example], samples: &[Vec<SegMap>]) -> Result<CalibrationSummary> {
    let (spec, table) = match (&data.spec, &data.table) {
        (Some(s), Some(t)) => (s, t),
        _ => return Err(LabError::config("calibration needs the flips task")),
    };
    let conv = data.cfg.iou()?;
    let modes: Vec<Vec<SegMap>> =
        examples.iter().map(|ex| Ok(data.ground_truth(ex)?.maps().to_vec())).collect::<Result<_>>()?;
    let inst: Vec<(&[SegMap], &[SegMap])> = samples.iter().zip(&modes).map(|(s, m)| (&s[..], &m[..])).collect();
    let sampled = closest_mode_frequencies(&inst, &conv)?;
    let ground_truth = table.weights();
    let max_deviation = sampled.iter().zip(&ground_truth).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let bases: Vec<(&[SegMap], &SegMap)> = samples.iter().zip(examples).map(|(s, ex)| (&s[..], &ex.labels[0])).collect();
    let pm = pixel_marginals(&bases, &spec.flip_pairs())?;
    let marginals = spec.pairs().iter().zip(pm).map(|(p, m)| (to_f64(&p.prob), m)).collect();
    Ok(CalibrationSummary {
        samples_per_image: samples.first().map_or(0, Vec::len),
        ground_truth,
        sampled,
        max_deviation,
        marginals,
    })
}

/// Sampled mode frequencies against the analytic mode probabilities.
pub fn cmd_calibrate(model_dir: &Path, data_dir: &Path, out: &Path, opts: &EvalOptions) -> Result<CalibrationSummary> {
    let (mut cfg, model, data) = open(model_dir, data_dir)?;
    if data.cfg.task != Task::Flips {
        return Err(LabError::config("calibration is defined for the flips task only"));
    }
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    let n = model.max_samples().map_or(CALIBRATION_SAMPLES, |m| m.min(CALIBRATION_SAMPLES));
    cfg.samples = vec![n];
    let inputs = [Input::model(model_dir)?, Input::data(data_dir)?];
    let test = data.split(Split::Test)?;
    if test.is_empty() {
        return Err(LabError::data(data_dir, "test split is empty"));
    }
    prepare_out(out, opts.force)?;
    let samples: Vec<Vec<SegMap>> =
        par_map(&test, opts.jobs, |ex| Ok(model.predict(&ex.image, n, &mut eval_rng(cfg.seed, ex.id))?))?;
    let summary = calibration(&data, &test, &samples)?;
    let table = data.table.as_ref().expect("flips task");
    let rows: Vec<Vec<String>> = summary
        .ground_truth
        .iter()
        .zip(&summary.sampled)
        .enumerate()
        .map(|(j, (w, f))| vec![j.to_string(), w.to_string(), f.to_string()])
        .collect();
    write_csv(&out.join("calibration.csv"), &["mode_id", "ground_truth_prob", "sampled_freq"], &rows)?;
    let spec = data.spec.as_ref().expect("flips task");
    let rows: Vec<Vec<String>> = spec
        .pairs()
        .iter()
        .zip(&summary.marginals)
        .enumerate()
        .map(|(i, (p, (w, m)))| {
            vec![
                i.to_string(),
                p.base.to_string(),
                p.flipped.to_string(),
                w.to_string(),
                m.map_or_else(String::new, |v| v.to_string()),
            ]
        })
        .collect();
    write_csv(
        &out.join("pixel_marginals.csv"),
        &["pair", "base_class", "flipped_class", "ground_truth_prob", "sampled_freq"],
        &rows,
    )?;
    let plot = Plot {
        title: format!("Mode calibration ({} modes, {n} samples per image)", table.len()),
        x_label: "ground-truth probability".into(),
        y_label: "sampled frequency".into(),
        x_scale: Scale::Log10,
        y_scale: Scale::Log10,
        series: vec![Series {
            label: model.variant().name().into(),
            points: summary.ground_truth.iter().copied().zip(summary.sampled.iter().copied()).collect(),
            line: false,
        }],
        bisector: true,
    };
    write_file(&out.join("calibration.svg"), plot.render().as_bytes())?;
    write_provenance(out, &cfg, &inputs)?;
    Ok(summary)
}
