//! Synthetic embedding datasets with a controllable carrier modality.
//!
//! Every `(target, class)` pair owns a latent direction built from a
//! class-wide component plus a target-specific perturbation, so classes stay
//! related across targets (zero-shot transfer is possible) without being
//! identical. Fixed random maps lift the latent into text and visual space.
//! A modality that does not carry the signal receives isotropic noise.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, EmbeddingRecord, Stance, NUM_CLASSES};
use crate::error::{DimeError, Result};

const LATENT_DIM: usize = 8;
const TARGET_SPREAD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dominance {
    TextDominant,
    VisualDominant,
    Shared,
    /// Each record independently draws one of the three modes above; the
    /// choice is stored under `meta["mode"]`.
    Mixed,
}

impl Dominance {
    pub fn as_str(self) -> &'static str {
        match self {
            Dominance::TextDominant => "text_dominant",
            Dominance::VisualDominant => "visual_dominant",
            Dominance::Shared => "shared",
            Dominance::Mixed => "mixed",
        }
    }

    fn carries(self) -> (bool, bool) {
        match self {
            Dominance::TextDominant => (true, false),
            Dominance::VisualDominant => (false, true),
            Dominance::Shared => (true, true),
            Dominance::Mixed => unreachable!("mixed is resolved per record"),
        }
    }
}

impl fmt::Display for Dominance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dominance {
    type Err = DimeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "text_dominant" => Ok(Dominance::TextDominant),
            "visual_dominant" => Ok(Dominance::VisualDominant),
            "shared" => Ok(Dominance::Shared),
            "mixed" => Ok(Dominance::Mixed),
            other => Err(DimeError::Parameter(format!("unknown dominance mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_per_class_per_target: usize,
    pub targets: Vec<String>,
    pub d_text: usize,
    pub d_visual: usize,
    pub dominance: Dominance,
    /// Expected norm of the additive noise relative to the unit-norm signal.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_per_class_per_target: 100,
            targets: vec!["A".into(), "B".into()],
            d_text: 768,
            d_visual: 512,
            dominance: Dominance::TextDominant,
            noise_sigma: 0.1,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_class_per_target == 0 {
            return Err(DimeError::Parameter("n_per_class_per_target must be at least 1".into()));
        }
        if self.targets.is_empty() {
            return Err(DimeError::Parameter("at least one target is required".into()));
        }
        let mut seen = self.targets.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.targets.len() {
            return Err(DimeError::Parameter("target names must be distinct".into()));
        }
        if self.d_text == 0 || self.d_visual == 0 {
            return Err(DimeError::Parameter("embedding dimensions must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(DimeError::Parameter(format!(
                "noise_sigma must be a finite non-negative number, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

fn gaussian(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn to_f32_unit(v: Vec<f64>) -> Vec<f32> {
    normalized(v).into_iter().map(|x| x as f32).collect()
}

/// Dense `rows x LATENT_DIM` Gaussian map applied to a latent vector.
fn lift(map: &[f64], latent: &[f64]) -> Vec<f64> {
    map.chunks(LATENT_DIM)
        .map(|row| row.iter().zip(latent).map(|(a, b)| a * b).sum())
        .collect()
}

/// `signal + noise` (or pure isotropic noise when `signal` is `None`),
/// L2-normalized. Noise has per-coordinate scale `sigma / sqrt(d)`.
fn emit(signal: Option<&[f64]>, d: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let z = gaussian(d, rng);
    match signal {
        Some(s) => {
            let scale = sigma / (d as f64).sqrt();
            to_f32_unit(s.iter().zip(z).map(|(a, b)| a + scale * b).collect())
        }
        None => to_f32_unit(z),
    }
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let text_map = gaussian(cfg.d_text * LATENT_DIM, &mut rng);
    let visual_map = gaussian(cfg.d_visual * LATENT_DIM, &mut rng);
    let class_base: Vec<Vec<f64>> = (0..NUM_CLASSES).map(|_| gaussian(LATENT_DIM, &mut rng)).collect();
    let prompt = to_f32_unit(gaussian(cfg.d_text, &mut rng));

    let mut ds = Dataset::new(cfg.d_text, cfg.d_visual, Some(prompt));
    for target in &cfg.targets {
        for stance in Stance::ALL {
            let jitter = gaussian(LATENT_DIM, &mut rng);
            let latent = normalized(
                class_base[stance.index()]
                    .iter()
                    .zip(&jitter)
                    .map(|(c, j)| c + TARGET_SPREAD * j)
                    .collect(),
            );
            let text_signal = normalized(lift(&text_map, &latent));
            let visual_signal = normalized(lift(&visual_map, &latent));

            for i in 0..cfg.n_per_class_per_target {
                let mode = match cfg.dominance {
                    Dominance::Mixed => [Dominance::TextDominant, Dominance::VisualDominant, Dominance::Shared]
                        [rng.gen_range(0..3)],
                    m => m,
                };
                let (in_text, in_visual) = mode.carries();
                let e_text = emit(in_text.then_some(&text_signal[..]), cfg.d_text, cfg.noise_sigma, &mut rng);
                let e_visual = emit(
                    in_visual.then_some(&visual_signal[..]),
                    cfg.d_visual,
                    cfg.noise_sigma,
                    &mut rng,
                );
                let meta = (cfg.dominance == Dominance::Mixed)
                    .then(|| BTreeMap::from([("mode".to_string(), mode.as_str().to_string())]));
                ds.records.push(EmbeddingRecord {
                    id: format!("{target}-{}-{i:05}", stance.index()),
                    target: target.clone(),
                    label: stance,
                    e_text,
                    e_visual,
                    e_prompt: None,
                    meta,
                });
            }
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(dominance: Dominance, noise: f64, d_text: usize, d_visual: usize, n: usize) -> SyntheticConfig {
        SyntheticConfig {
            n_per_class_per_target: n,
            targets: vec!["A".into(), "B".into()],
            d_text,
            d_visual,
            dominance,
            noise_sigma: noise,
            seed: 13,
        }
    }

    /// Training accuracy of a least-squares one-hot probe (with intercept)
    /// fitted through the normal equations.
    fn probe_accuracy(xs: &[Vec<f32>], labels: &[usize]) -> f64 {
        let d = xs[0].len() + 1;
        let feats: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| x.iter().map(|v| *v as f64).chain([1.0]).collect())
            .collect();
        let mut a = vec![vec![0.0; d + NUM_CLASSES]; d];
        for (f, &y) in feats.iter().zip(labels) {
            for i in 0..d {
                for j in 0..d {
                    a[i][j] += f[i] * f[j];
                }
                a[i][d + y] += f[i];
            }
        }
        for (i, row) in a.iter_mut().enumerate() {
            row[i] += 1e-9;
        }
        // Gauss-Jordan with partial pivoting on [A | B].
        for col in 0..d {
            let piv = (col..d).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
            a.swap(col, piv);
            let p = a[col][col];
            for v in a[col].iter_mut() {
                *v /= p;
            }
            for r in 0..d {
                if r != col {
                    let factor = a[r][col];
                    let pivot_row = a[col].clone();
                    for (v, pv) in a[r].iter_mut().zip(&pivot_row) {
                        *v -= factor * pv;
                    }
                }
            }
        }
        let correct = feats
            .iter()
            .zip(labels)
            .filter(|(f, &y)| {
                let scores: Vec<f64> = (0..NUM_CLASSES)
                    .map(|c| (0..d).map(|i| f[i] * a[i][d + c]).sum())
                    .collect();
                let best = (0..NUM_CLASSES).max_by(|&x, &y| scores[x].total_cmp(&scores[y])).unwrap();
                best == y
            })
            .count();
        correct as f64 / labels.len() as f64
    }

    fn probes(ds: &Dataset) -> (f64, f64) {
        let labels: Vec<usize> = ds.records.iter().map(|r| r.label.index()).collect();
        let t: Vec<Vec<f32>> = ds.records.iter().map(|r| r.e_text.clone()).collect();
        let v: Vec<Vec<f32>> = ds.records.iter().map(|r| r.e_visual.clone()).collect();
        (probe_accuracy(&t, &labels), probe_accuracy(&v, &labels))
    }

    #[test]
    fn text_dominant_signal_lives_in_text_only() {
        let ds = generate_synthetic(&cfg(Dominance::TextDominant, 0.0, 16, 4, 200)).unwrap();
        let (text_acc, visual_acc) = probes(&ds);
        assert_eq!(text_acc, 1.0);
        assert!(visual_acc < 0.45, "visual probe {visual_acc}");
    }

    #[test]
    fn visual_dominant_mirrors_text_dominant() {
        let ds = generate_synthetic(&cfg(Dominance::VisualDominant, 0.0, 4, 16, 200)).unwrap();
        let (text_acc, visual_acc) = probes(&ds);
        assert_eq!(visual_acc, 1.0);
        assert!(text_acc < 0.45, "text probe {text_acc}");
    }

    #[test]
    fn shared_signal_is_in_both() {
        let ds = generate_synthetic(&cfg(Dominance::Shared, 0.0, 16, 12, 50)).unwrap();
        assert_eq!(probes(&ds), (1.0, 1.0));
    }

    #[test]
    fn deterministic_and_unit_norm() {
        let c = cfg(Dominance::Mixed, 0.4, 24, 10, 20);
        let a = generate_synthetic(&c).unwrap();
        assert_eq!(a, generate_synthetic(&c).unwrap());
        assert_eq!(a.len(), 2 * 3 * 20);
        let norm = |v: &[f32]| v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        for r in &a.records {
            assert!((norm(&r.e_text) - 1.0).abs() < 1e-6);
            assert!((norm(&r.e_visual) - 1.0).abs() < 1e-6);
            assert!(r.meta.as_ref().unwrap().contains_key("mode"));
        }
        assert!((norm(a.default_prompt_embedding.as_ref().unwrap()) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = cfg(Dominance::Shared, 0.1, 4, 4, 0);
        assert!(generate_synthetic(&c).is_err());
        c.n_per_class_per_target = 1;
        c.noise_sigma = -1.0;
        assert!(generate_synthetic(&c).is_err());
        assert!("sideways".parse::<Dominance>().is_err());
        assert_eq!("text-dominant".parse::<Dominance>().unwrap(), Dominance::TextDominant);
    }
}
