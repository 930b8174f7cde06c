//! Adam with decoupled weight decay and optional global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let zeros = || store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// One update. `grads[i]` belongs to the i-th parameter of `store`;
    /// `None` leaves the parameter untouched (frozen or off-graph).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>]) {
        self.t += 1;
        let (b1, b2) = self.cfg.betas;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (lr, wd, eps) = (self.cfg.lr, self.cfg.weight_decay, self.cfg.eps);
        for (i, p) in store.iter_mut().enumerate() {
            let Some(g) = grads[i].as_deref() else { continue };
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                *w -= lr * (update + wd * *w);
            }
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Vec<f64>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| g.iter_mut().for_each(|x| *x *= s));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![1.0, -2.0, 0.5]));
        let mut opt = Adam::new(&store, AdamConfig { lr: 0.1, ..AdamConfig::default() });
        opt.step(&mut store, &[Some(vec![3.0, -0.01, 0.0])]);
        let w = store.iter().next().unwrap().value.data().to_vec();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 1.9).abs() < 1e-4);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![5.0, -3.0]));
        let mut opt = Adam::new(&store, AdamConfig { lr: 0.05, ..AdamConfig::default() });
        for _ in 0..2000 {
            let g: Vec<f64> = store.iter().next().unwrap().value.data().iter().map(|w| 2.0 * (w - 1.0)).collect();
            opt.step(&mut store, &[Some(g)]);
        }
        for w in store.iter().next().unwrap().value.data() {
            assert!((w - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn zero_lr_and_frozen_params_do_not_move() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![1.0]));
        store.add_frozen("f", Tensor::vector(vec![2.0]));
        let before = store.clone();
        let mut opt = Adam::new(&store, AdamConfig { lr: 0.0, weight_decay: 0.1, ..AdamConfig::default() });
        opt.step(&mut store, &[Some(vec![1.0]), Some(vec![1.0])]);
        let mut opt = Adam::new(&store, AdamConfig::default());
        opt.step(&mut store, &[None, Some(vec![1.0])]);
        for (a, b) in store.iter().zip(before.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn clipping_rescales_only_above_threshold() {
        let mut g = vec![Some(vec![3.0]), None, Some(vec![4.0])];
        assert_eq!(clip_global_norm(&mut g, 10.0), 5.0);
        assert_eq!(g[0].as_deref(), Some(&[3.0][..]));
        clip_global_norm(&mut g, 1.0);
        assert!((g[0].as_ref().unwrap()[0] - 0.6).abs() < 1e-15);
        assert!((g[2].as_ref().unwrap()[0] - 0.8).abs() < 1e-15);
    }
}
