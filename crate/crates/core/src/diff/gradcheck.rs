// SPDX-License-Identifier: Apache-2.0

//! Central finite-difference verification of tape gradients.

use alloc::vec::Vec;

use super::params::{ParamGroup, ParamId, ParamStore};
use super::tape::{Tape, TensorId};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Spacing of the five-point stencil.
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the denominator of the relative error, so entries
    /// whose true gradient is ~0 are judged on absolute error.
    pub floor: f64,
    /// Check at most this many evenly spaced entries of each parameter.
    pub max_per_param: Option<usize>,
    /// Restrict the check to these groups.
    pub groups: Option<Vec<ParamGroup>>,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { step: 1e-3, tolerance: 1e-4, floor: 1e-6, max_per_param: None, groups: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter and flat index of the worst entry.
    pub worst: Option<(ParamId, usize)>,
    pub checked: usize,
    /// Entries left out because every tried stencil straddled a relu or
    /// clamp kink.
    pub kinked: usize,
    pub passed: bool,
}

/// `|analytic − numeric| / max(|numeric|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(floor)
}

fn evaluate<F>(store: &ParamStore, build: &mut F) -> Result<(f64, Vec<u8>)>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<TensorId>,
{
    let mut tape = Tape::new();
    let out = build(&mut tape, store)?;
    Ok((tape.scalar(out), tape.kink_signature()))
}

/// Gradient of the built scalar with respect to every stored parameter.
pub fn analytic_gradients<F>(store: &ParamStore, build: &mut F) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<TensorId>,
{
    let mut scratch = store.clone();
    scratch.zero_grad();
    let mut tape = Tape::new();
    let out = build(&mut tape, &scratch)?;
    tape.backward(out)?;
    tape.accumulate_param_grads(&mut scratch);
    Ok(scratch.iter().map(|(_, p)| p.grad.clone()).collect())
}

/// Fourth-order central difference for a single parameter entry,
/// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`.
pub fn numeric_gradient<F>(store: &mut ParamStore, build: &mut F, id: ParamId, index: usize, step: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<TensorId>,
{
    Ok(stencil(store, build, id, index, step)?.0)
}

/// The difference quotient and whether all four points share the kink
/// signature of the unperturbed evaluation.
fn stencil<F>(store: &mut ParamStore, build: &mut F, id: ParamId, index: usize, step: f64) -> Result<(f64, bool)>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<TensorId>,
{
    let orig = store.get(id).value[index];
    let (_, base) = evaluate(store, build)?;
    let mut smooth = true;
    let mut at = |offset: f64| -> Result<f64> {
        store.get_mut(id).value[index] = orig + offset;
        let r = evaluate(store, build);
        store.get_mut(id).value[index] = orig;
        let (v, sig) = r?;
        smooth &= sig == base;
        Ok(v)
    };
    let (p2, p1, m1, m2) = (at(2.0 * step)?, at(step)?, at(-step)?, at(-2.0 * step)?);
    Ok(((-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * step), smooth))
}

/// Steps tried per entry, as fractions of the configured step, before an
/// entry is set aside as sitting on a kink.
const SHRINK: [f64; 3] = [1.0, 0.1, 0.01];

/// Compare analytic gradients of `build` against central differences and
/// report the worst relative error.
pub fn grad_check<F>(store: &mut ParamStore, cfg: &GradCheck, mut build: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<TensorId>,
{
    let analytic = analytic_gradients(store, &mut build)?;
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0, kinked: 0, passed: true };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        if cfg.groups.as_ref().is_some_and(|gs| !gs.contains(&store.get(id).group)) {
            continue;
        }
        let n = store.get(id).value.len();
        let stride = match cfg.max_per_param {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for index in (0..n).step_by(stride) {
            let mut numeric = None;
            for f in SHRINK {
                let (v, smooth) = stencil(store, &mut build, id, index, cfg.step * f)?;
                if smooth {
                    numeric = Some(v);
                    break;
                }
            }
            let Some(numeric) = numeric else {
                report.kinked += 1;
                continue;
            };
            let err = relative_error(analytic[id.index()][index], numeric, cfg.floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((id, index));
                }
            }
        }
    }
    report.passed = report.checked > 0 && report.max_rel_error < cfg.tolerance;
    Ok(report)
}
