//! Instance-conditioned gate over the three experts and the stance classifier.
//!
//! Gate weights are ordered `[pi_t, pi_v, pi_tv]`. With the alignment expert
//! ablated the gate is a 2-way softmax over the first two logits and the
//! cross-modal expert takes no part in the mixture.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::NUM_CLASSES;
use crate::error::{DimeError, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Graph, Var};

pub const NUM_EXPERTS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatingConfig {
    pub d_hidden: usize,
    pub tau: f64,
}

impl Default for GatingConfig {
    fn default() -> Self {
        Self {
            d_hidden: 256,
            tau: 1.0,
        }
    }
}

impl GatingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_hidden == 0 {
            return Err(DimeError::Parameter("gating d_hidden must be positive".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(DimeError::Parameter(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Gate {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Gate {
    pub fn new<R: Rng + ?Sized>(d_common: usize, cfg: &GatingConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        Self {
            w1: store.add_weight("gating.w1", cfg.d_hidden, 2 * d_common, rng),
            b1: store.add_zeros("gating.b1", cfg.d_hidden),
            w2: store.add_weight("gating.w2", NUM_EXPERTS, cfg.d_hidden, rng),
            b2: store.add_zeros("gating.b2", NUM_EXPERTS),
        }
    }

    /// Pre-softmax gate scores `[B, 3]` from the projected text and visual
    /// embeddings.
    pub fn logits(&self, g: &mut Graph, p: &Bound, e_t: Var, e_v: Var) -> Result<Var> {
        let x = g.concat_cols(e_t, e_v)?;
        let hdn = g.linear(x, p.var(self.w1), Some(p.var(self.b1)))?;
        let hdn = g.relu(hdn);
        g.linear(hdn, p.var(self.w2), Some(p.var(self.b2)))
    }

    /// Gate weights: `[B, 3]`, or `[B, 2]` when `ablate_alignment` is set.
    pub fn weights(
        &self,
        g: &mut Graph,
        p: &Bound,
        cfg: &GatingConfig,
        e_t: Var,
        e_v: Var,
        ablate_alignment: bool,
    ) -> Result<Var> {
        let z = self.logits(g, p, e_t, e_v)?;
        let z = if ablate_alignment { g.slice_cols(z, 0, 2)? } else { z };
        g.softmax(z, cfg.tau)
    }
}

/// `h = sum_k pi[:, k] * experts[k]`, one row per record. `pi` may have
/// fewer columns than `experts` has entries; the trailing experts are
/// dropped.
pub fn fuse_experts(g: &mut Graph, pi: Var, experts: &[Var]) -> Result<Var> {
    let k = match g.value(pi).shape() {
        [_, k] if *k <= experts.len() && *k > 0 => *k,
        s => return Err(DimeError::dim("fuse_experts", s, &[0, experts.len()])),
    };
    let mut h = None;
    for (j, &e) in experts.iter().take(k).enumerate() {
        let w = g.column(pi, j)?;
        let term = g.scale_rows(e, w)?;
        h = Some(match h {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    Ok(h.expect("k > 0"))
}

#[derive(Debug, Clone)]
pub struct Classifier {
    pub w: ParamId,
    pub b: ParamId,
}

impl Classifier {
    pub fn new<R: Rng + ?Sized>(d_model: usize, store: &mut ParamStore, rng: &mut R) -> Self {
        Self {
            w: store.add_weight("classifier.weight", NUM_CLASSES, d_model, rng),
            b: store.add_zeros("classifier.bias", NUM_CLASSES),
        }
    }

    /// Logits `[B, 3]`; probabilities are `softmax(logits)` at unit temperature.
    pub fn logits(&self, g: &mut Graph, p: &Bound, h: Var) -> Result<Var> {
        g.linear(h, p.var(self.w), Some(p.var(self.b)))
    }
}

/// Unweighted sum of the loss terms; the alignment term is omitted when
/// `l_s` is `None`.
pub fn total_loss(g: &mut Graph, l_t: Var, l_v: Var, l_s: Option<Var>, l_ce: Var) -> Result<Var> {
    let mut tot = g.add(l_t, l_v)?;
    if let Some(l_s) = l_s {
        tot = g.add(tot, l_s)?;
    }
    g.add(tot, l_ce)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ops, Tensor};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rows(b: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::new(vec![b, d], (0..b * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn setup(d: usize, hidden: usize) -> (ParamStore, Gate, Classifier, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let cfg = GatingConfig { d_hidden: hidden, tau: 1.0 };
        let gate = Gate::new(d, &cfg, &mut store, &mut rng);
        let cls = Classifier::new(d, &mut store, &mut rng);
        (store, gate, cls, rng)
    }

    #[test]
    fn zero_second_layer_gives_uniform_weights() {
        let (mut store, gate, _, mut rng) = setup(4, 5);
        *store.get_mut(gate.w2) = Tensor::zeros(&[3, 5]);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let (t, v) = (g.constant(rows(6, 4, &mut rng)), g.constant(rows(6, 4, &mut rng)));
        let pi = gate.weights(&mut g, &p, &GatingConfig::default(), t, v, false).unwrap();
        assert_eq!(g.value(pi).shape(), &[6, 3]);
        for x in g.value(pi).data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn temperature_behaviour() {
        let z = Tensor::vector(vec![1.0, 0.0, 0.0]);
        let sharp = ops::softmax_with_temperature(&z, 0.01).unwrap();
        assert!(sharp.data()[0] > 0.999);
        let z = Tensor::vector(vec![0.3, -1.2, 0.9]);
        for tau in [0.5, 1.0, 2.0] {
            let pi = ops::softmax_with_temperature(&z, tau).unwrap();
            let am = (0..3).max_by(|&a, &b| pi.data()[a].total_cmp(&pi.data()[b])).unwrap();
            assert_eq!(am, 2);
        }
    }

    #[test]
    fn ablated_gate_is_two_way() {
        let (store, gate, _, mut rng) = setup(4, 5);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let (t, v) = (g.constant(rows(3, 4, &mut rng)), g.constant(rows(3, 4, &mut rng)));
        let full = gate.logits(&mut g, &p, t, v).unwrap();
        let pi = gate.weights(&mut g, &p, &GatingConfig::default(), t, v, true).unwrap();
        assert_eq!(g.value(pi).shape(), &[3, 2]);
        for i in 0..3 {
            let z = g.value(full).row(i);
            let expect = ops::softmax_with_temperature(&Tensor::vector(z[..2].to_vec()), 1.0).unwrap();
            for (a, b) in g.value(pi).row(i).iter().zip(expect.data()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    fn mix(pi: &[f64], experts: &[Tensor]) -> Tensor {
        let mut g = Graph::new();
        let piv = g.constant(Tensor::matrix(1, pi.len(), pi.to_vec()).unwrap());
        let ev: Vec<Var> = experts.iter().map(|e| g.constant(e.clone())).collect();
        let h = fuse_experts(&mut g, piv, &ev).unwrap();
        g.value(h).clone()
    }

    #[test]
    fn fuse_experts_examples() {
        let ht = Tensor::matrix(1, 3, vec![0.1, -0.7, 2.0]).unwrap();
        let hv = Tensor::matrix(1, 3, vec![5.0, 1.0, -1.0]).unwrap();
        let htv = Tensor::matrix(1, 3, vec![-3.0, 0.5, 0.25]).unwrap();
        assert_eq!(mix(&[1.0, 0.0, 0.0], &[ht.clone(), hv.clone(), htv]), ht);
        let u = Tensor::matrix(1, 3, vec![0.3, -0.2, 0.9]).unwrap();
        let h = mix(&[0.2, 0.5, 0.3], &[u.clone(), u.clone(), u.clone()]);
        for (a, b) in h.data().iter().zip(u.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        let h = mix(&[0.25, 0.75], &[ht, hv, u]);
        assert!((h.data()[0] - (0.025 + 3.75)).abs() < 1e-12);
    }

    #[test]
    fn classifier_examples() {
        let (mut store, _, cls, mut rng) = setup(4, 5);
        *store.get_mut(cls.w) = Tensor::zeros(&[3, 4]);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let h = g.constant(rows(5, 4, &mut rng));
        let z = cls.logits(&mut g, &p, h).unwrap();
        let probs = g.softmax(z, 1.0).unwrap();
        for x in g.value(probs).data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }

        let (store, _, cls, mut rng) = setup(4, 5);
        let hv = rows(5, 4, &mut rng);
        let run = |store: &ParamStore| {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let h = g.constant(hv.clone());
            let z = cls.logits(&mut g, &p, h).unwrap();
            let probs = g.softmax(z, 1.0).unwrap();
            g.value(probs).clone()
        };
        let base = run(&store);
        for i in 0..5 {
            assert!((base.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let mut shifted = store.clone();
        shifted.get_mut(cls.b).data_mut().iter_mut().for_each(|b| *b += 3.7);
        let moved = run(&shifted);
        let argmax = |r: &[f64]| (0..3).max_by(|&a, &b| r[a].total_cmp(&r[b])).unwrap();
        for i in 0..5 {
            assert_eq!(argmax(base.row(i)), argmax(moved.row(i)));
        }
    }

    #[test]
    fn total_loss_examples() {
        let mut g = Graph::new();
        let s = |g: &mut Graph, x: f64| g.constant(Tensor::scalar(x));
        let (a, b, c, d) = (s(&mut g, 0.5), s(&mut g, 0.3), s(&mut g, 0.1), s(&mut g, 1.1));
        let tot = total_loss(&mut g, a, b, Some(c), d).unwrap();
        assert!((g.value(tot).item() - 2.0).abs() < 1e-12);
        let tot = total_loss(&mut g, a, b, None, d).unwrap();
        assert!((g.value(tot).item() - 1.9).abs() < 1e-12);
        let z = s(&mut g, 0.0);
        let tot = total_loss(&mut g, z, z, Some(z), z).unwrap();
        assert_eq!(g.value(tot).item(), 0.0);
    }

    proptest! {
        #[test]
        fn gate_is_a_distribution_and_mixture_is_bounded(seed in 0u64..10_000, tau in 0.05f64..5.0) {
            let (store, gate, _, _) = setup(4, 6);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let (t, v) = (g.constant(rows(4, 4, &mut rng)), g.constant(rows(4, 4, &mut rng)));
            let cfg = GatingConfig { d_hidden: 6, tau };
            let pi = gate.weights(&mut g, &p, &cfg, t, v, false).unwrap();
            let experts: Vec<Tensor> = (0..3).map(|_| rows(4, 5, &mut rng)).collect();
            let ev: Vec<Var> = experts.iter().map(|e| g.constant(e.clone())).collect();
            let h = fuse_experts(&mut g, pi, &ev).unwrap();
            let norm = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>().sqrt();
            for i in 0..4 {
                let row = g.value(pi).row(i);
                prop_assert!(row.iter().all(|x| *x > 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                let bound = experts.iter().map(|e| norm(e.row(i))).fold(0.0, f64::max);
                prop_assert!(norm(g.value(h).row(i)) <= bound + 1e-12);
            }
        }
    }
}
