// SPDX-License-Identifier: Apache-2.0

use std::path::{Path, PathBuf};

use probseg_core::metrics::{
    ambiguity_accuracy, ambiguity_threshold, majority_rate, presence_count, wilcoxon_signed_rank,
    Direction, ThresholdRule, Wilcoxon,
};
use probseg_core::nets::Model;
use probseg_core::SegMap;

use super::evaluate::CALIBRATION_SAMPLES;
use super::{
    data_hash, eval_rng, evaluate_model, load_model, par_map, prepare_out, write_csv, write_provenance, DataSource,
    Input, INPUTS_FILE,
};
use crate::config::{ExperimentConfig, Task};
use crate::dataset::{Example, Split};
use crate::error::{LabError, Result};
use crate::formats::write_file;
use crate::svg::{Plot, Scale, Series};

#[derive(Clone, Debug, Default)]
pub struct CompareOptions {
    pub samples: Option<Vec<usize>>,
    pub seed: Option<u64>,
    pub jobs: usize,
    pub force: bool,
}

/// One ordered pair of models: `p` is small when `a` has larger d2 than `b`.
#[derive(Clone, Debug)]
pub struct WilcoxonRow {
    pub a: String,
    pub a_samples: usize,
    pub b: String,
    pub b_samples: usize,
    /// `Err` holds the reason the test was rejected.
    pub result: std::result::Result<Wilcoxon, String>,
}

#[derive(Clone, Debug)]
pub struct AmbiguityRow {
    pub model: String,
    pub samples: usize,
    pub rule: ThresholdRule,
    pub test_accuracy: f64,
    pub majority_rate: f64,
    /// Test instances per presence count: `(ambiguous, unambiguous)`.
    pub histogram: Vec<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct CompareSummary {
    pub names: Vec<String>,
    /// Per model: `(sample count, mean d2)` for every count it supports.
    pub means: Vec<Vec<(usize, f64)>>,
    /// Per model: per-image d2 at its largest supported count.
    pub per_image: Vec<Vec<f64>>,
    pub wilcoxon: Vec<WilcoxonRow>,
    pub ambiguity: Vec<AmbiguityRow>,
}

impl CompareSummary {
    pub fn mean(&self, model: usize, count: usize) -> Option<f64> {
        self.means[model].iter().find(|(c, _)| *c == count).map(|(_, m)| *m)
    }

    pub fn wilcoxon(&self, a: &str, b: &str) -> Option<&WilcoxonRow> {
        self.wilcoxon.iter().find(|r| r.a == a && r.b == b)
    }
}

fn name_of(dir: &Path) -> String {
    dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// The data hash a model recorded when it was trained.
fn trained_on(dir: &Path) -> Result<Option<String>> {
    let p = dir.join(INPUTS_FILE);
    let text = std::fs::read_to_string(&p).map_err(|e| LabError::io(&p, e))?;
    Ok(text.lines().find_map(|l| {
        let mut parts = l.splitn(3, ' ');
        let (hash, role) = (parts.next()?, parts.next()?);
        (role == "data").then(|| hash.to_string())
    }))
}

fn presence(model: &Model, examples: &[Example], n: usize, seed: u64, jobs: usize) -> Result<Vec<(usize, bool)>> {
    par_map(examples, jobs, |ex| {
        let s: Vec<SegMap> = model.predict(&ex.image, n, &mut eval_rng(seed, ex.id))?;
        Ok((presence_count(&s), ex.ambiguous))
    })
}

/// Fit the presence-count threshold on `val` and score it on `test`, with
/// up to 16 samples per image.
pub fn ambiguity_report(
    name: &str,
    model: &Model,
    val: &[Example],
    test: &[Example],
    seed: u64,
    jobs: usize,
) -> Result<AmbiguityRow> {
    let n = model.max_samples().map_or(CALIBRATION_SAMPLES, |m| m.min(CALIBRATION_SAMPLES));
    let v = presence(model, val, n, seed, jobs)?;
    let t = presence(model, test, n, seed, jobs)?;
    let rule = ambiguity_threshold(&v, n)?;
    let mut histogram = vec![(0usize, 0usize); n + 1];
    for &(c, amb) in &t {
        if amb {
            histogram[c].0 += 1;
        } else {
            histogram[c].1 += 1;
        }
    }
    Ok(AmbiguityRow {
        model: name.to_string(),
        samples: n,
        rule,
        test_accuracy: ambiguity_accuracy(&t, &rule)?,
        majority_rate: majority_rate(&t),
        histogram,
    })
}

/// Evaluate several models on one test split, test every ordered pair for
/// a difference in per-image d2, and on lesion data fit and score the
/// presence-count ambiguity rule per model.
pub fn cmd_compare(model_dirs: &[PathBuf], data_dir: &Path, out: &Path, opts: &CompareOptions) -> Result<CompareSummary> {
    if model_dirs.len() < 2 {
        return Err(LabError::config("compare needs at least two models"));
    }
    let data = DataSource::open(data_dir)?;
    let hash = data_hash(data_dir)?;
    let mut models: Vec<(String, ExperimentConfig, Model)> = Vec::new();
    let mut inputs = vec![Input::data(data_dir)?];
    for dir in model_dirs {
        let (mut cfg, model) = load_model(dir, false)?;
        data.check_model(&cfg)?;
        if let Some(h) = trained_on(dir)? {
            if h != hash {
                return Err(LabError::data(dir, "model was trained on a different dataset than the one compared on"));
            }
        }
        if let Some(s) = &opts.samples {
            cfg.samples = s.clone();
        }
        let mut name = name_of(dir);
        if models.iter().any(|(n, _, _)| *n == name) {
            name = format!("{name}#{}", models.len());
        }
        inputs.push(Input::model(dir)?);
        models.push((name, cfg, model));
    }
    let requested = opts.samples.clone().unwrap_or_else(|| models[0].1.samples.clone());
    if requested.is_empty() || requested.contains(&0) {
        return Err(LabError::config("sample counts must be positive"));
    }
    let seed = opts.seed.unwrap_or(models[0].1.seed);
    let test = data.split(Split::Test)?;
    if test.is_empty() {
        return Err(LabError::data(data_dir, "test split is empty"));
    }
    prepare_out(out, opts.force)?;
    let mut means = Vec::new();
    let mut per_image = Vec::new();
    let mut largest = Vec::new();
    for (name, cfg, model) in &models {
        let counts: Vec<usize> = requested.iter().copied().filter(|&c| model.max_samples().is_none_or(|m| c <= m)).collect();
        if counts.is_empty() {
            return Err(LabError::config(format!("{name} supports none of the requested sample counts")));
        }
        let images = evaluate_model(model, cfg, &data, &test, &counts, seed, opts.jobs)?;
        let n = images.len() as f64;
        means.push(
            counts
                .iter()
                .enumerate()
                .map(|(i, &c)| (c, images.iter().map(|e| e.reports[i].d2).sum::<f64>() / n))
                .collect::<Vec<_>>(),
        );
        let last = counts.len() - 1;
        per_image.push(images.iter().map(|e| e.reports[last].d2).collect::<Vec<_>>());
        largest.push(counts[last]);
    }
    let mut wilcoxon = Vec::new();
    for i in 0..models.len() {
        for j in 0..models.len() {
            if i == j {
                continue;
            }
            wilcoxon.push(WilcoxonRow {
                a: models[i].0.clone(),
                a_samples: largest[i],
                b: models[j].0.clone(),
                b_samples: largest[j],
                result: wilcoxon_signed_rank(&per_image[i], &per_image[j]).map_err(|e| e.to_string()),
            });
        }
    }
    let mut ambiguity = Vec::new();
    if data.cfg.task == Task::Blobs {
        let val = data.split(Split::Val)?;
        for (name, _, model) in &models {
            ambiguity.push(ambiguity_report(name, model, &val, &test, seed, opts.jobs)?);
        }
    }
    write_outputs(out, &models, &means, &wilcoxon, &ambiguity)?;
    let mut echo = models[0].1.clone();
    echo.samples = requested;
    echo.seed = seed;
    write_provenance(out, &echo, &inputs)?;
    Ok(CompareSummary { names: models.into_iter().map(|m| m.0).collect(), means, per_image, wilcoxon, ambiguity })
}

fn write_outputs(
    out: &Path,
    models: &[(String, ExperimentConfig, Model)],
    means: &[Vec<(usize, f64)>],
    wilcoxon: &[WilcoxonRow],
    ambiguity: &[AmbiguityRow],
) -> Result<()> {
    let mut rows = Vec::new();
    for ((name, cfg, _), m) in models.iter().zip(means) {
        for (c, d2) in m {
            rows.push(vec![name.clone(), cfg.variant().name().to_string(), c.to_string(), d2.to_string()]);
        }
    }
    write_csv(&out.join("comparison.csv"), &["model", "variant", "n_samples", "mean_d2"], &rows)?;
    let rows: Vec<Vec<String>> = wilcoxon
        .iter()
        .map(|r| {
            let mut row = vec![r.a.clone(), r.a_samples.to_string(), r.b.clone(), r.b_samples.to_string()];
            match &r.result {
                Ok(w) => row.extend([
                    w.n.to_string(),
                    w.w.to_string(),
                    w.p.to_string(),
                    w.exact.to_string(),
                    "ok".to_string(),
                ]),
                Err(e) => row.extend([String::new(), String::new(), String::new(), String::new(), format!("rejected: {e}")]),
            }
            row
        })
        .collect();
    write_csv(
        &out.join("wilcoxon.csv"),
        &["model_a", "samples_a", "model_b", "samples_b", "n", "w", "p_a_greater", "exact", "status"],
        &rows,
    )?;
    if !ambiguity.is_empty() {
        let rows: Vec<Vec<String>> = ambiguity
            .iter()
            .map(|a| {
                vec![
                    a.model.clone(),
                    a.samples.to_string(),
                    a.rule.t.to_string(),
                    match a.rule.direction {
                        Direction::Below => "below",
                        Direction::Above => "above",
                    }
                    .to_string(),
                    a.rule.accuracy.to_string(),
                    a.test_accuracy.to_string(),
                    a.majority_rate.to_string(),
                ]
            })
            .collect();
        write_csv(
            &out.join("ambiguity.csv"),
            &["model", "n_samples", "threshold", "direction", "val_accuracy", "test_accuracy", "test_majority_rate"],
            &rows,
        )?;
        let mut rows = Vec::new();
        for a in ambiguity {
            for (c, (amb, unamb)) in a.histogram.iter().enumerate() {
                rows.push(vec![a.model.clone(), c.to_string(), amb.to_string(), unamb.to_string()]);
            }
        }
        write_csv(&out.join("presence.csv"), &["model", "present_samples", "ambiguous", "unambiguous"], &rows)?;
    }
    let plot = Plot {
        title: "Squared energy distance on the test split".into(),
        x_label: "samples per image".into(),
        y_label: "mean d2".into(),
        x_scale: Scale::Log10,
        y_scale: Scale::Linear,
        series: models
            .iter()
            .zip(means)
            .map(|((name, _, _), m)| Series {
                label: name.clone(),
                points: m.iter().map(|&(c, d)| (c as f64, d)).collect(),
                line: true,
            })
            .collect(),
        bisector: false,
    };
    write_file(&out.join("comparison.svg"), plot.render().as_bytes())
}
