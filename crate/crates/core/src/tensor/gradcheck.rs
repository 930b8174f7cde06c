//! Tape gradients versus central finite differences.
//!
//! Entries whose one-sided difference quotients disagree by more than
//! `kink_tol` sit within `h` of a non-differentiable point (a ReLU or
//! hinge kink); those are reported as skipped instead of compared. Random
//! inputs land on such points with probability zero, so in practice only
//! constructed cases are skipped.

use super::{Graph, Tensor, Var};
use crate::error::{DimeError, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Maximum admissible relative error.
    pub tol: f64,
    /// Lower bound of the relative-error denominator, so that entries whose
    /// true gradient is ~0 are judged on absolute error.
    pub rel_floor: f64,
    pub kink_tol: f64,
    /// Check at most this many evenly strided entries per parameter.
    pub max_entries_per_param: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            rel_floor: 1e-6,
            kink_tol: 1e-3,
            max_entries_per_param: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    /// Entries skipped as non-differentiable points.
    pub skipped: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !p.passed)
    }
}

fn evaluate<F>(params: &[(String, Tensor)], build: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| g.param(t.clone())).collect();
    let root = build(&mut g, &vars)?;
    let v = g.value(root);
    if v.len() != 1 {
        return Err(DimeError::Usage(format!(
            "gradient check needs a scalar loss, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}

/// Compares tape gradients of the scalar produced by `build` against central
/// differences for every named parameter. `build` must be deterministic:
/// anything stochastic has to be reseeded inside it.
pub fn check_gradients<F>(
    params: &[(String, Tensor)],
    build: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| g.param(t.clone())).collect();
    let root = build(&mut g, &vars)?;
    if g.value(root).len() != 1 {
        return Err(DimeError::Usage(format!(
            "gradient check needs a scalar loss, got shape {:?}",
            g.value(root).shape()
        )));
    }
    let f0 = g.value(root).item();
    g.backward(root)?;

    let mut work: Vec<(String, Tensor)> = params.to_vec();
    let mut report = Vec::with_capacity(params.len());
    for (pi, var) in vars.iter().enumerate() {
        let n = params[pi].1.len();
        let analytic = g.grad(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let stride = cfg
            .max_entries_per_param
            .map_or(1, |k| n.div_ceil(k.max(1)));
        let mut check = ParamCheck {
            name: params[pi].0.clone(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            checked: 0,
            skipped: 0,
            passed: true,
        };
        for j in (0..n).step_by(stride) {
            let orig = work[pi].1.data()[j];
            work[pi].1.data_mut()[j] = orig + cfg.h;
            let fp = evaluate(&work, &build)?;
            work[pi].1.data_mut()[j] = orig - cfg.h;
            let fm = evaluate(&work, &build)?;
            work[pi].1.data_mut()[j] = orig;

            let d_plus = (fp - f0) / cfg.h;
            let d_minus = (f0 - fm) / cfg.h;
            if (d_plus - d_minus).abs() > cfg.kink_tol * d_plus.abs().max(d_minus.abs()).max(1.0) {
                check.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * cfg.h);
            let abs = (analytic[j] - numeric).abs();
            let rel = abs / analytic[j].abs().max(numeric.abs()).max(cfg.rel_floor);
            check.max_abs_err = check.max_abs_err.max(abs);
            check.max_rel_err = check.max_rel_err.max(rel);
            check.checked += 1;
        }
        check.passed = check.max_rel_err < cfg.tol;
        report.push(check);
    }
    Ok(GradCheckReport {
        tol: cfg.tol,
        params: report,
    })
}
