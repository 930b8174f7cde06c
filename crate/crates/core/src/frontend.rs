//! Linear projection of raw embeddings into the common model space, plus the
//! random visual prompt `e_r`.
//!
//! All four outputs are L2-normalized rows. During training `e_r` is a fresh
//! Gaussian draw per record; at evaluation it is a frozen vector drawn once
//! at initialization. `e_r` is never differentiated.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{DimeError, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VisualPromptPolicy {
    /// New draw for every record in every training forward pass; frozen
    /// vector in evaluation.
    #[default]
    ResampleTrainFixedEval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrontendConfig {
    pub d_text_in: usize,
    pub d_visual_in: usize,
    pub d_common: usize,
    pub eps_norm: f64,
    #[serde(default)]
    pub e_r_policy: VisualPromptPolicy,
    pub e_r_sigma: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            d_text_in: 768,
            d_visual_in: 512,
            d_common: 512,
            eps_norm: 1e-12,
            e_r_policy: VisualPromptPolicy::ResampleTrainFixedEval,
            e_r_sigma: 1.0,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_text_in == 0 || self.d_visual_in == 0 || self.d_common == 0 {
            return Err(DimeError::Parameter("frontend dimensions must be positive".into()));
        }
        if !(self.eps_norm > 0.0) {
            return Err(DimeError::Parameter("eps_norm must be > 0".into()));
        }
        if !(self.e_r_sigma >= 0.0) {
            return Err(DimeError::Parameter("e_r_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Frontend {
    pub w_text: ParamId,
    pub b_text: ParamId,
    pub w_visual: ParamId,
    pub b_visual: ParamId,
    pub w_prompt: ParamId,
    pub b_prompt: ParamId,
    pub e_r_eval: ParamId,
}

/// Raw inputs for a batch of `B` records, one row each.
#[derive(Debug, Clone, PartialEq)]
pub struct FrontendInput {
    pub text: Tensor,
    pub visual: Tensor,
    pub prompt: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct Projected {
    pub e_p: Var,
    pub e_t: Var,
    pub e_v: Var,
    pub e_r: Var,
}

impl Frontend {
    pub fn new<R: Rng + ?Sized>(cfg: &FrontendConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let d = cfg.d_common;
        let w_text = store.add_weight("frontend.text.weight", d, cfg.d_text_in, rng);
        let b_text = store.add_zeros("frontend.text.bias", d);
        let w_visual = store.add_weight("frontend.visual.weight", d, cfg.d_visual_in, rng);
        let b_visual = store.add_zeros("frontend.visual.bias", d);
        let w_prompt = store.add_weight("frontend.prompt.weight", d, cfg.d_text_in, rng);
        let b_prompt = store.add_zeros("frontend.prompt.bias", d);
        let draw: Vec<f64> = (0..d)
            .map(|_| cfg.e_r_sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let e_r_eval = store.add_frozen("frontend.e_r_eval", Tensor::vector(draw));
        Self {
            w_text,
            b_text,
            w_visual,
            b_visual,
            w_prompt,
            b_prompt,
            e_r_eval,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn project<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        p: &Bound,
        cfg: &FrontendConfig,
        input: &FrontendInput,
        training: bool,
        rng: &mut R,
    ) -> Result<Projected> {
        let check = |field: &str, t: &Tensor, d: usize| -> Result<usize> {
            match t.shape() {
                [b, n] if *n == d => Ok(*b),
                s => Err(DimeError::Input(format!(
                    "{field}: expected rows of length {d}, got shape {s:?}"
                ))),
            }
        };
        let b = check("e_text", &input.text, cfg.d_text_in)?;
        if check("e_visual", &input.visual, cfg.d_visual_in)? != b
            || check("e_prompt", &input.prompt, cfg.d_text_in)? != b
        {
            return Err(DimeError::Input("frontend inputs disagree on batch size".into()));
        }
        let eps = cfg.eps_norm;
        let lin = |g: &mut Graph, x: &Tensor, w: ParamId, bias: ParamId| -> Result<Var> {
            let xv = g.constant(x.clone());
            let y = g.linear(xv, p.var(w), Some(p.var(bias)))?;
            g.l2_normalize(y, eps)
        };
        let e_t = lin(g, &input.text, self.w_text, self.b_text)?;
        let e_v = lin(g, &input.visual, self.w_visual, self.b_visual)?;
        let e_p = lin(g, &input.prompt, self.w_prompt, self.b_prompt)?;

        let d = cfg.d_common;
        let raw = if training {
            let data = (0..b * d)
                .map(|_| cfg.e_r_sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Tensor::new(vec![b, d], data)?
        } else {
            let frozen = g.value(p.var(self.e_r_eval)).data().to_vec();
            Tensor::new(vec![b, d], frozen.repeat(b))?
        };
        let r = g.constant(raw);
        let e_r = g.l2_normalize(r, eps)?;
        Ok(Projected { e_p, e_t, e_v, e_r })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(d_in: usize, d: usize) -> (FrontendConfig, ParamStore, Frontend) {
        let cfg = FrontendConfig {
            d_text_in: d_in,
            d_visual_in: d_in,
            d_common: d,
            ..FrontendConfig::default()
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = Frontend::new(&cfg, &mut store, &mut rng);
        (cfg, store, f)
    }

    fn input(rng: &mut ChaCha8Rng, b: usize, d_in: usize) -> FrontendInput {
        let mut m = || {
            Tensor::new(vec![b, d_in], (0..b * d_in).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .unwrap()
        };
        FrontendInput {
            text: m(),
            visual: m(),
            prompt: m(),
        }
    }

    fn norms(t: &Tensor) -> Vec<f64> {
        let (m, _) = t.rows_cols();
        (0..m).map(|i| t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
    }

    #[test]
    fn identity_projection_preserves_unit_input() {
        let (cfg, mut store, f) = setup(4, 4);
        for w in [f.w_text, f.w_visual, f.w_prompt] {
            *store.get_mut(w) = Tensor::eye(4);
        }
        let unit = Tensor::matrix(1, 4, vec![0.5, -0.5, 0.5, 0.5]).unwrap();
        let inp = FrontendInput {
            text: unit.clone(),
            visual: unit.clone(),
            prompt: unit.clone(),
        };
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = f.project(&mut g, &p, &cfg, &inp, false, &mut rng).unwrap();
        for v in [out.e_t, out.e_v, out.e_p] {
            assert_eq!(g.value(v).data(), unit.data());
        }
    }

    #[test]
    fn outputs_are_unit_norm() {
        let (cfg, store, f) = setup(6, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inp = input(&mut rng, 7, 6);
        for training in [false, true] {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let out = f.project(&mut g, &p, &cfg, &inp, training, &mut rng).unwrap();
            for v in [out.e_p, out.e_t, out.e_v, out.e_r] {
                for n in norms(g.value(v)) {
                    assert!((n - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn visual_prompt_policy() {
        let (cfg, store, f) = setup(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inp = input(&mut rng, 2, 3);
        let run = |training: bool, seed: u64| {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let out = f.project(&mut g, &p, &cfg, &inp, training, &mut r).unwrap();
            g.value(out.e_r).clone()
        };
        assert_eq!(run(true, 9), run(true, 9));
        assert_ne!(run(true, 9), run(true, 10));
        let eval = run(false, 1);
        assert_eq!(eval, run(false, 2));
        let frozen = crate::tensor::ops::l2_normalize(store.get(f.e_r_eval), 1e-12).unwrap();
        assert_eq!(eval.row(0), frozen.data());
        assert_eq!(eval.row(1), frozen.data());
    }

    #[test]
    fn e_r_receives_no_gradient() {
        let (cfg, store, f) = setup(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inp = input(&mut rng, 2, 3);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let out = f.project(&mut g, &p, &cfg, &inp, false, &mut rng).unwrap();
        let s1 = g.sum(out.e_r);
        let s2 = g.sum(out.e_t);
        let tot = g.add(s1, s2).unwrap();
        g.backward(tot).unwrap();
        assert!(g.grad(p.var(f.e_r_eval)).is_none());
        assert!(g.grad(p.var(f.w_text)).is_some());
    }

    #[test]
    fn dimension_mismatch_names_the_field() {
        let (cfg, store, f) = setup(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut inp = input(&mut rng, 2, 3);
        inp.visual = Tensor::zeros(&[2, 5]);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let err = f.project(&mut g, &p, &cfg, &inp, false, &mut rng).unwrap_err().to_string();
        assert!(err.contains("e_visual"), "{err}");
    }
}
