// SPDX-License-Identifier: Apache-2.0

use std::path::Path;

use probseg_core::synth::{enumerate_modes, lidc_rng, render_scene, scene_rng, to_f64, toy_lidc_example};

use super::{par_map, prepare_out, write_csv, write_provenance, Input, MODES_FILE};
use crate::config::{ExperimentConfig, Task};
use crate::dataset::{write_dataset, Example, ManifestRow, Split};
use crate::error::{LabError, Result};
use crate::formats::quantize;

#[derive(Clone, Debug)]
pub struct GenerateSummary {
    pub config: ExperimentConfig,
    pub rows: Vec<ManifestRow>,
}

/// Render every split of the configured task into `out`.
pub fn cmd_generate(
    cfg: &ExperimentConfig,
    config_path: Option<&Path>,
    out: &Path,
    force: bool,
    jobs: usize,
) -> Result<GenerateSummary> {
    let cfg = cfg.resolve()?;
    let inputs = [Input::config(config_path)?];
    prepare_out(out, force)?;
    let mut ids = Vec::new();
    for (split, n) in [(Split::Train, cfg.train_size), (Split::Val, cfg.val_size), (Split::Test, cfg.test_size)] {
        ids.extend((0..n as u64).map(|i| (split, split.first_id() + i)));
    }
    let examples = match cfg.task {
        Task::Flips => {
            let scene = cfg.scene_config()?;
            par_map(&ids, jobs, |&(split, id)| {
                let ex = render_scene(&scene, id, &mut scene_rng(cfg.seed, id))
                    .map_err(|e| LabError::config(format!("cannot render scene {id}: {e}")))?;
                Ok(Example { id, split, image: quantize(&ex.image), labels: vec![ex.base_labels], ambiguous: true })
            })?
        }
        Task::Blobs => {
            let lidc = cfg.lidc_config();
            par_map(&ids, jobs, |&(split, id)| {
                let g = toy_lidc_example(&lidc, id, &mut lidc_rng(cfg.seed, id))
                    .map_err(|e| LabError::config(format!("cannot render lesion {id}: {e}")))?;
                Ok(Example { id, split, image: quantize(&g.image), labels: g.masks, ambiguous: g.ambiguous })
            })?
        }
    };
    let rows = write_dataset(&examples, out)?;
    if cfg.task == Task::Flips {
        let table = enumerate_modes(&cfg.flip_spec()?).map_err(|e| LabError::config(e.to_string()))?;
        let rows: Vec<Vec<String>> = table
            .modes()
            .iter()
            .enumerate()
            .map(|(j, m)| {
                vec![
                    j.to_string(),
                    (0..table.k()).map(|i| if m.pattern >> i & 1 == 1 { '1' } else { '0' }).collect(),
                    m.prob.numer().to_string(),
                    m.prob.denom().to_string(),
                    to_f64(&m.prob).to_string(),
                ]
            })
            .collect();
        write_csv(&out.join(MODES_FILE), &["mode_id", "pattern", "numerator", "denominator", "probability"], &rows)?;
    }
    write_provenance(out, &cfg, &inputs)?;
    Ok(GenerateSummary { config: cfg, rows })
}
