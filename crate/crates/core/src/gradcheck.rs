//! Finite-difference gradient checking.
//!
//! The tape runs at `f32`; the central differences are taken on an `f64`
//! evaluation of the same objective so that the oracle's own rounding noise
//! stays far below the tolerance being tested.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// A scalar-valued function of some tensors, evaluable at any precision.
pub trait Objective {
    fn eval<S: Scalar>(&self, g: &mut Graph<S>, inputs: &[Var]) -> Result<Var>;
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Probe at most this many entries per input tensor (all when `None`).
    pub max_entries: Option<usize>,
    pub seed: u64,
    /// Gradient magnitude below which differences count absolutely. The tape
    /// runs at `f32`, so exact zeros come back as rounding noise near 1e-7.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            max_entries: None,
            seed: 0,
            floor: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, flat index)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn eval_scalar<O: Objective>(obj: &O, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = obj.eval(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::shape("grad_check", "objective must be scalar"));
    }
    let x = v.item();
    if !x.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    Ok(x)
}

/// Tape gradients of `obj` at `inputs`.
pub fn tape_gradients<O: Objective>(obj: &O, inputs: &[Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
    let mut g = Graph::<f32>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = obj.eval(&mut g, &vars)?;
    let grads = g.backward(out)?;
    Ok(vars.iter().map(|&v| grads.get(&g, v)).collect())
}

/// Compares tape gradients with central differences and returns the worst
/// element-wise relative error.
pub fn grad_check<O: Objective>(obj: &O, inputs: &[Tensor<f32>], opts: &GradCheckOptions) -> Result<GradCheckReport> {
    if !(1e-5..=1e-2).contains(&opts.eps) {
        return Err(Error::Param(format!(
            "finite-difference step {} outside [1e-5, 1e-2]",
            opts.eps
        )));
    }
    let analytic = tape_gradients(obj, inputs)?;
    if analytic.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    let mut probe: Vec<Tensor<f64>> = inputs.iter().map(|t| t.cast()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
    };
    for k in 0..inputs.len() {
        let n = inputs[k].numel();
        let mut idx: Vec<usize> = match opts.max_entries {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        idx.sort_unstable();
        for e in idx {
            let orig = probe[k].data()[e];
            probe[k].data_mut()[e] = orig + opts.eps;
            let plus = eval_scalar(obj, &probe)?;
            probe[k].data_mut()[e] = orig - opts.eps;
            let minus = eval_scalar(obj, &probe)?;
            probe[k].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[k].data()[e] as f64;
            let err = relative_error(a, numeric, opts.floor);
            report.entries_checked += 1;
            if err > report.max_rel_error || report.entries_checked == 1 {
                report.max_rel_error = err;
                report.worst = (k, e);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
