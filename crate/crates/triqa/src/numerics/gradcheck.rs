//! Finite-difference verification of tape gradients.

use super::params::ParamSet;
use super::tape::{Tape, Var};
use super::tensor::Scalar;
use crate::error::Result;
use rand::seq::SliceRandom;

/// Knobs for [`gradient_check`]. The defaults suit `f64` graphs; central
/// differences at `eps = 1e-5` are far too coarse for `f32`.
#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Perturbation for central differences.
    pub eps: f64,
    /// Upper bound on checked coordinates across all parameters; larger
    /// tensors are subsampled deterministically from `seed`.
    pub max_coords: usize,
    pub seed: u64,
    /// Floor on the relative-error denominator, equivalent to the
    /// `atol / rtol` ratio of the usual two-tolerance comparison
    /// `|a - n| <= atol + rtol * max(|a|, |n|)`. The default suits `f64`;
    /// for `f32` graphs raise it to the central-difference noise scale
    /// (about `1e-4`), otherwise coordinates whose true gradient sits
    /// below single-precision resolution dominate the report.
    pub denom_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            max_coords: 200,
            seed: 0,
            denom_floor: 1e-8,
        }
    }
}

/// Worst coordinate found by a check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Compare tape gradients of a scalar loss against central differences.
///
/// `build` must construct the loss for the given parameters from scratch and
/// be deterministic: any internal randomness (dropout masks) has to be
/// re-derived from fixed seeds, otherwise the difference quotient measures
/// noise. Relative error uses `|a - n| / max(|a|, |n|, denom_floor)`;
/// parameters with no gradient entry count as analytic zero so
/// silently-dropped gradients are caught rather than skipped.
pub fn gradient_check<S, F>(params: &ParamSet<S>, build: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    S: Scalar,
    F: for<'t> Fn(&'t Tape<S>, &ParamSet<S>) -> Result<Var<'t, S>>,
{
    let tape = Tape::new();
    let loss = build(&tape, params)?;
    tape.backward(loss)?;
    let analytic = tape.param_grads();

    let mut coords: Vec<(String, usize)> = Vec::new();
    for (name, p) in params.iter() {
        if p.trainable {
            for i in 0..p.tensor.numel() {
                coords.push((name.clone(), i));
            }
        }
    }
    if coords.len() > opts.max_coords {
        let mut rng = super::seeded_rng(opts.seed, 0x6772_6164);
        coords.shuffle(&mut rng);
        coords.truncate(opts.max_coords);
    }

    let eps = opts.eps;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst_param: None,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };

    let eval_at = |name: &str, idx: usize, delta: f64| -> Result<f64> {
        let mut shifted = params.clone();
        shifted.update(name, |t| {
            let v = t.data()[idx].to_f64c() + delta;
            t.data_mut()[idx] = S::from_f64c(v);
        })?;
        let tape = Tape::new();
        let loss = build(&tape, &shifted)?;
        Ok(loss.value().data()[0].to_f64c())
    };

    for (name, idx) in coords {
        let plus = eval_at(&name, idx, eps)?;
        let minus = eval_at(&name, idx, -eps)?;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic
            .get(&name)
            .map(|g| g.data()[idx].to_f64c())
            .unwrap_or(0.0);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.denom_floor);
        report.checked += 1;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_param = Some(name.clone());
            report.worst_index = idx;
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}
