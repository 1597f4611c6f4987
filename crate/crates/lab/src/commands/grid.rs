// SPDX-License-Identifier: Apache-2.0

use std::path::Path;

use probseg_core::metrics::closest_mode;
use probseg_core::SegMap;

use super::{load_model, prepare_out, write_csv, write_provenance, DataSource, Input};
use crate::dataset::read_dataset;
use crate::error::{LabError, Result};
use crate::formats::write_seg;

#[derive(Clone, Debug)]
pub struct GridOptions {
    pub image_id: u64,
    pub plane: (usize, usize),
    pub steps: usize,
    /// Half-width of the grid in prior standard deviations.
    pub span_sigma: f64,
    pub force: bool,
}

impl Default for GridOptions {
    fn default() -> Self {
        GridOptions { image_id: 2_000_000, plane: (0, 1), steps: 19, span_sigma: 3.0, force: false }
    }
}

#[derive(Clone, Debug)]
pub struct GridSummary {
    pub maps: Vec<SegMap>,
    /// Relative paths of the written grid files, row-major.
    pub files: Vec<String>,
    /// Whitened posterior means of the ground-truth variants.
    pub coordinates: Vec<Vec<f64>>,
    /// Decoding of the prior mean itself.
    pub prior_mean_map: SegMap,
}

/// Decode a regular grid over two whitened latent axes for one image and
/// locate every ground-truth variant of that image in the same coordinates.
pub fn cmd_latent_grid(model_dir: &Path, data_dir: &Path, out: &Path, opts: &GridOptions) -> Result<GridSummary> {
    let (cfg, model) = load_model(model_dir, false)?;
    let data = DataSource::open(data_dir)?;
    data.check_model(&cfg)?;
    let v = model.variant();
    if !v.learned_prior() {
        return Err(LabError::config(format!("{} has no prior net to whiten against", v.name())));
    }
    if cfg.arch.latent_dim < 2 {
        return Err(LabError::config("latent grids need latent_dim >= 2"));
    }
    let (a, b) = opts.plane;
    if a == b || a >= cfg.arch.latent_dim || b >= cfg.arch.latent_dim {
        return Err(LabError::config(format!("plane ({a}, {b}) invalid for latent_dim {}", cfg.arch.latent_dim)));
    }
    if opts.steps == 0 {
        return Err(LabError::config("steps must be positive"));
    }
    let inputs = [Input::model(model_dir)?, Input::data(data_dir)?];
    let ex = read_dataset(data_dir, None)?
        .into_iter()
        .find(|e| e.id == opts.image_id)
        .ok_or_else(|| LabError::data(data_dir, format!("no image with id {}", opts.image_id)))?;
    prepare_out(out, opts.force)?;
    let grid = model.latent_grid(&ex.image, opts.plane, opts.steps, opts.span_sigma)?;
    let gt = data.ground_truth(&ex)?;
    let conv = cfg.iou()?;
    let mut files = Vec::with_capacity(grid.maps.len());
    let mut rows = Vec::with_capacity(grid.maps.len());
    for (k, (map, (ua, ub))) in grid.maps.iter().zip(&grid.coords).enumerate() {
        let (r, c) = (k / opts.steps, k % opts.steps);
        let name = format!("grid/r{r:02}_c{c:02}.seg");
        write_seg(&out.join(&name), map)?;
        let nearest = closest_mode(map, gt.maps(), &conv)?;
        rows.push(vec![r.to_string(), c.to_string(), ua.to_string(), ub.to_string(), name.clone(), nearest.to_string()]);
        files.push(name);
    }
    write_csv(&out.join("grid.csv"), &["row", "col", "u_a", "u_b", "path", "nearest_variant"], &rows)?;
    let coordinates =
        gt.maps().iter().map(|y| Ok(model.posterior_project(&ex.image, y)?)).collect::<Result<Vec<Vec<f64>>>>()?;
    let weights: Vec<String> = match &gt {
        super::GroundTruth::Mixture { weights, .. } => weights.iter().map(f64::to_string).collect(),
        super::GroundTruth::Samples(m) => vec![(1.0 / m.len() as f64).to_string(); m.len()],
    };
    let mut header: Vec<String> = vec!["variant".into(), "probability".into(), "u_a".into(), "u_b".into()];
    header.extend((0..cfg.arch.latent_dim).map(|i| format!("w{i}")));
    let rows: Vec<Vec<String>> = coordinates
        .iter()
        .enumerate()
        .map(|(j, w)| {
            let mut row = vec![j.to_string(), weights[j].clone(), w[a].to_string(), w[b].to_string()];
            row.extend(w.iter().map(f64::to_string));
            row
        })
        .collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(&out.join("coordinates.csv"), &header, &rows)?;
    let prior = model.density_forward(probseg_core::nets::DensityNet::Prior, &ex.image, None)?;
    let prior_mean_map = model.decode(&ex.image, prior.mu())?;
    write_provenance(out, &cfg, &inputs)?;
    Ok(GridSummary { maps: grid.maps, files, coordinates, prior_mean_map })
}
