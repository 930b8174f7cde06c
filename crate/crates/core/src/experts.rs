//! Expert objectives on the fused triple `(E_t, E_v, E_tv)`.
//!
//! * textual: triplet hinge with anchor `E_tv`, positive `E_t`, negative `E_v`
//! * visual: the mirror image, positive `E_v`, negative `E_t`
//! * alignment: `(1 - cos(E_tv, E_t)) + (1 - cos(E_tv, E_v))`
//!
//! Distances are Euclidean. Each loss is evaluated per record and averaged
//! over the batch. Expert heads are the identity, so `h_x = E_x`.

use serde::{Deserialize, Serialize};

use crate::error::{DimeError, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertLossConfig {
    pub margin: f64,
    pub eps_cos: f64,
}

impl Default for ExpertLossConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            eps_cos: 1e-8,
        }
    }
}

impl ExpertLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0) {
            return Err(DimeError::Parameter(format!("margin must be >= 0, got {}", self.margin)));
        }
        if !(self.eps_cos > 0.0) {
            return Err(DimeError::Parameter("eps_cos must be > 0".into()));
        }
        Ok(())
    }
}

/// Per-record `max(0, m + d(anchor, pos) - d(anchor, neg))`, `[B]`.
fn triplet_rows(g: &mut Graph, anchor: Var, pos: Var, neg: Var, margin: f64) -> Result<Var> {
    let dp = g.row_distance(anchor, pos)?;
    let dn = g.row_distance(anchor, neg)?;
    let z = g.sub(dp, dn)?;
    let z = g.add_scalar(z, margin);
    Ok(g.relu(z))
}

pub fn loss_textual(g: &mut Graph, e_t: Var, e_v: Var, e_tv: Var, cfg: &ExpertLossConfig) -> Result<Var> {
    let rows = triplet_rows(g, e_tv, e_t, e_v, cfg.margin)?;
    Ok(g.mean(rows))
}

pub fn loss_visual(g: &mut Graph, e_t: Var, e_v: Var, e_tv: Var, cfg: &ExpertLossConfig) -> Result<Var> {
    let rows = triplet_rows(g, e_tv, e_v, e_t, cfg.margin)?;
    Ok(g.mean(rows))
}

pub fn loss_alignment(g: &mut Graph, e_t: Var, e_v: Var, e_tv: Var, cfg: &ExpertLossConfig) -> Result<Var> {
    let ct = g.row_cosine(e_tv, e_t, cfg.eps_cos)?;
    let cv = g.row_cosine(e_tv, e_v, cfg.eps_cos)?;
    let s = g.add(ct, cv)?;
    let rows = g.scale(s, -1.0);
    let rows = g.add_scalar(rows, 2.0);
    Ok(g.mean(rows))
}

#[derive(Debug, Clone, Copy)]
pub struct ExpertOutputs {
    pub h_t: Var,
    pub h_v: Var,
    pub h_tv: Var,
    pub loss_textual: Var,
    pub loss_visual: Var,
    pub loss_alignment: Var,
}

pub fn expert_outputs(g: &mut Graph, e_t: Var, e_v: Var, e_tv: Var, cfg: &ExpertLossConfig) -> Result<ExpertOutputs> {
    Ok(ExpertOutputs {
        h_t: e_t,
        h_v: e_v,
        h_tv: e_tv,
        loss_textual: loss_textual(g, e_t, e_v, e_tv, cfg)?,
        loss_visual: loss_visual(g, e_t, e_v, e_tv, cfg)?,
        loss_alignment: loss_alignment(g, e_t, e_v, e_tv, cfg)?,
    })
}

/// Eager `(L_T, L_V, L_S)` for a single triple or a batch of rows.
pub fn expert_losses(e_t: &Tensor, e_v: &Tensor, e_tv: &Tensor, cfg: &ExpertLossConfig) -> Result<(f64, f64, f64)> {
    let mut g = Graph::new();
    let (t, v, tv) = (g.constant(e_t.clone()), g.constant(e_v.clone()), g.constant(e_tv.clone()));
    let out = expert_outputs(&mut g, t, v, tv, cfg)?;
    Ok((
        g.value(out.loss_textual).item(),
        g.value(out.loss_visual).item(),
        g.value(out.loss_alignment).item(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> Tensor {
        Tensor::vector(xs.to_vec())
    }

    fn cfg(m: f64) -> ExpertLossConfig {
        ExpertLossConfig {
            margin: m,
            ..Default::default()
        }
    }

    #[test]
    fn textual_examples() {
        // d(E_tv, E_t) = 0, d(E_tv, E_v) = m.
        let (lt, _, _) = expert_losses(&v(&[1.0, 0.0]), &v(&[1.0, 1.5]), &v(&[1.0, 0.0]), &cfg(1.5)).unwrap();
        assert_eq!(lt, 0.0);
        let (lt, lv, _) = expert_losses(&v(&[0.3, 0.4]), &v(&[0.3, 0.4]), &v(&[-1.0, 2.0]), &cfg(0.7)).unwrap();
        assert_eq!(lt, 0.7);
        assert_eq!(lv, 0.7);
        // d(anchor, pos) = 0.5, d(anchor, neg) = 0.2, m = 1.
        let (lt, _, _) = expert_losses(&v(&[0.5, 0.0]), &v(&[0.0, 0.2]), &v(&[0.0, 0.0]), &cfg(1.0)).unwrap();
        assert!((lt - 1.3).abs() < 1e-12);
    }

    #[test]
    fn alignment_examples() {
        let u = v(&[0.2, -0.4, 1.0]);
        let (_, _, ls) = expert_losses(&u, &u, &u, &cfg(1.0)).unwrap();
        assert!(ls.abs() < 1e-12);
        let (_, _, ls) = expert_losses(&v(&[1.0, 0.0, 0.0]), &v(&[0.0, 1.0, 0.0]), &v(&[0.0, 0.0, 3.0]), &cfg(1.0)).unwrap();
        assert!((ls - 2.0).abs() < 1e-12);
        let neg = v(&[-0.2, 0.4, -1.0]);
        let (_, _, ls) = expert_losses(&neg, &neg, &u, &cfg(1.0)).unwrap();
        assert!((ls - 4.0).abs() < 1e-12);
    }

    #[test]
    fn zero_margin_colinear_triple_has_zero_losses() {
        let u = v(&[1.0, 2.0]);
        let (lt, lv, ls) = expert_losses(&u, &u, &u, &cfg(0.0)).unwrap();
        assert_eq!((lt, lv), (0.0, 0.0));
        assert!(ls.abs() < 1e-12);
    }

    #[test]
    fn outputs_alias_the_fused_triple() {
        let mut g = Graph::new();
        let (t, vv, tv) = (g.constant(v(&[1.0])), g.constant(v(&[2.0])), g.constant(v(&[3.0])));
        let out = expert_outputs(&mut g, t, vv, tv, &cfg(1.0)).unwrap();
        assert_eq!((out.h_t, out.h_v, out.h_tv), (t, vv, tv));
    }

    #[test]
    fn saturated_hinge_has_zero_gradient() {
        let mut g = Graph::new();
        let t = g.param(v(&[0.0, 0.1]));
        let vv = g.param(v(&[5.0, 5.0]));
        let tv = g.param(v(&[0.0, 0.0]));
        let l = loss_textual(&mut g, t, vv, tv, &cfg(1.0)).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        g.backward(l).unwrap();
        for x in [t, vv, tv] {
            assert!(g.grad(x).unwrap().iter().all(|d| *d == 0.0));
        }
    }

    #[test]
    fn alignment_is_scale_invariant_triplets_are_not() {
        let (a, b, c) = (v(&[0.3, -1.0, 0.8]), v(&[1.1, 0.2, -0.5]), v(&[-0.4, 0.9, 0.1]));
        let scaled = v(&[0.6, -2.0, 1.6]);
        let base = expert_losses(&a, &b, &c, &cfg(1.0)).unwrap();
        let s = expert_losses(&scaled, &b, &c, &cfg(1.0)).unwrap();
        assert!((base.2 - s.2).abs() < 1e-12);
        assert!((base.0 - s.0).abs() > 1e-3 || (base.1 - s.1).abs() > 1e-3);
    }

    fn triple() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>, f64)> {
        let vec = || prop::collection::vec(-3.0f64..3.0, 4);
        (vec(), vec(), vec(), 0.0f64..2.0)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn losses_are_bounded_and_mirrored((a, b, c, m) in triple()) {
            let k = cfg(m);
            let (lt, lv, ls) = expert_losses(&v(&a), &v(&b), &v(&c), &k).unwrap();
            prop_assert!(lt >= 0.0 && lv >= 0.0);
            prop_assert!((0.0..=4.0).contains(&ls));
            let (lt_sw, lv_sw, _) = expert_losses(&v(&b), &v(&a), &v(&c), &k).unwrap();
            prop_assert!((lv - lt_sw).abs() < 1e-9);
            prop_assert!((lt - lv_sw).abs() < 1e-9);

            let dp = crate::tensor::ops::euclidean_distance(&v(&c), &v(&a)).unwrap();
            let dn = crate::tensor::ops::euclidean_distance(&v(&c), &v(&b)).unwrap();
            if (dp - dn).abs() < m {
                prop_assert!(lt > 0.0 && lv > 0.0);
            }
        }
    }
}
