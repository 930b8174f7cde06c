//! The assembled model: frontend, three fusion pathways, expert losses, gate
//! and classifier.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, NUM_CLASSES};
use crate::error::{DimeError, Result};
use crate::experts::{expert_outputs, ExpertLossConfig};
use crate::frontend::{Frontend, FrontendConfig, FrontendInput, Projected};
use crate::fusion::{FusedTriple, FusionConfig, FusionTriple};
use crate::gating::{fuse_experts, total_loss, Classifier, Gate, GatingConfig, NUM_EXPERTS};
use crate::params::{Bound, ParamStore};
use crate::tensor::{check_gradients, GradCheckConfig, GradCheckReport, Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub frontend: FrontendConfig,
    /// Shared by all three pathways; `d_in` must equal `frontend.d_common`.
    pub fusion: FusionConfig,
    pub experts: ExpertLossConfig,
    pub gating: GatingConfig,
    /// Drop the alignment expert: no alignment loss, 2-way gate.
    pub ablate_alignment: bool,
    pub init_seed: u64,
}

impl ModelConfig {
    /// A very small model, used for gradient checks and quick tests.
    pub fn tiny(d_text_in: usize, d_visual_in: usize) -> Self {
        let d_common = 4;
        Self {
            frontend: FrontendConfig {
                d_text_in,
                d_visual_in,
                d_common,
                ..FrontendConfig::default()
            },
            fusion: FusionConfig {
                d_in: d_common,
                d_model: 4,
                n_heads: 2,
                n_layers: 1,
                d_ffn: 6,
                ..FusionConfig::default()
            },
            experts: ExpertLossConfig::default(),
            gating: GatingConfig { d_hidden: 5, tau: 1.0 },
            ablate_alignment: false,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.fusion.validate()?;
        self.experts.validate()?;
        self.gating.validate()?;
        if self.fusion.d_in != self.frontend.d_common {
            return Err(DimeError::Parameter(format!(
                "fusion d_in {} must equal frontend d_common {}",
                self.fusion.d_in, self.frontend.d_common
            )));
        }
        Ok(())
    }

    /// Checks that a dataset's embedding widths match the frontend.
    pub fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        if ds.d_text != self.frontend.d_text_in || ds.d_visual != self.frontend.d_visual_in {
            return Err(DimeError::Input(format!(
                "dataset has d_text={} d_visual={} but the model expects d_text={} d_visual={}",
                ds.d_text, ds.d_visual, self.frontend.d_text_in, self.frontend.d_visual_in
            )));
        }
        Ok(())
    }
}

/// Dense inputs for a batch of records.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub input: FrontendInput,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_dataset(ds: &Dataset, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(DimeError::Input("empty batch".into()));
        }
        let b = indices.len();
        let mut text = Vec::with_capacity(b * ds.d_text);
        let mut visual = Vec::with_capacity(b * ds.d_visual);
        let mut prompt = Vec::with_capacity(b * ds.d_text);
        let mut labels = Vec::with_capacity(b);
        for &i in indices {
            let r = &ds.records[i];
            ds.validate_record(r)?;
            let p = ds.prompt_for(r).expect("validated record has a prompt");
            text.extend(r.e_text.iter().map(|&x| x as f64));
            visual.extend(r.e_visual.iter().map(|&x| x as f64));
            prompt.extend(p.iter().map(|&x| x as f64));
            labels.push(r.label.index());
        }
        Ok(Self {
            input: FrontendInput {
                text: Tensor::new(vec![b, ds.d_text], text)?,
                visual: Tensor::new(vec![b, ds.d_visual], visual)?,
                prompt: Tensor::new(vec![b, ds.d_text], prompt)?,
            },
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Graph nodes of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub projected: Projected,
    pub fused: FusedTriple,
    /// `[B, 3]`, or `[B, 2]` when the alignment expert is ablated.
    pub pi: Var,
    pub h: Var,
    pub logits: Var,
    pub l_t: Var,
    pub l_v: Var,
    /// `None` when the alignment expert is ablated.
    pub l_s: Option<Var>,
    pub l_ce: Var,
    pub total: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_t: f64,
    pub l_v: f64,
    pub l_s: f64,
    pub l_ce: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn read(g: &Graph, t: &ForwardTrace) -> Self {
        Self {
            l_t: g.value(t.l_t).item(),
            l_v: g.value(t.l_v).item(),
            l_s: t.l_s.map_or(0.0, |v| g.value(v).item()),
            l_ce: g.value(t.l_ce).item(),
            total: g.value(t.total).item(),
        }
    }
}

/// Eval-mode outputs, one row per record.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Tensor,
    /// Always `[B, 3]`; the cross-modal column is 0 under ablation.
    pub pi: Tensor,
}

impl Prediction {
    pub fn labels(&self) -> Vec<usize> {
        let (m, _) = self.logits.rows_cols();
        (0..m)
            .map(|i| {
                let r = self.logits.row(i);
                (0..r.len()).fold(0, |best, j| if r[j] > r[best] { j } else { best })
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct DimeModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub frontend: Frontend,
    pub fusion: FusionTriple,
    pub gate: Gate,
    pub classifier: Classifier,
}

impl DimeModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let frontend = Frontend::new(&config.frontend, &mut store, &mut rng);
        let fusion = FusionTriple::new(&config.fusion, &mut store, &mut rng);
        let gate = Gate::new(config.frontend.d_common, &config.gating, &mut store, &mut rng);
        let classifier = Classifier::new(config.fusion.d_model, &mut store, &mut rng);
        Ok(Self {
            config,
            store,
            frontend,
            fusion,
            gate,
            classifier,
        })
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &Batch,
        training: bool,
        rng: &mut R,
    ) -> Result<ForwardTrace> {
        let cfg = &self.config;
        let projected = self.frontend.project(g, p, &cfg.frontend, &batch.input, training, rng)?;
        let fused = self.fusion.compute(g, p, &cfg.fusion, &projected, training, rng)?;
        let ex = expert_outputs(g, fused.e_t.pooled, fused.e_v.pooled, fused.e_tv.pooled, &cfg.experts)?;
        let pi = self.gate.weights(g, p, &cfg.gating, projected.e_t, projected.e_v, cfg.ablate_alignment)?;
        let h = fuse_experts(g, pi, &[ex.h_t, ex.h_v, ex.h_tv])?;
        let logits = self.classifier.logits(g, p, h)?;
        let l_ce = g.cross_entropy(logits, &batch.labels)?;
        let l_s = (!cfg.ablate_alignment).then_some(ex.loss_alignment);
        let total = total_loss(g, ex.loss_textual, ex.loss_visual, l_s, l_ce)?;
        Ok(ForwardTrace {
            projected,
            fused,
            pi,
            h,
            logits,
            l_t: ex.loss_textual,
            l_v: ex.loss_visual,
            l_s,
            l_ce,
            total,
        })
    }

    /// Deterministic eval-mode logits and gate weights.
    pub fn predict(&self, batch: &Batch) -> Result<Prediction> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        // Eval mode draws nothing; the generator is only a placeholder.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = self.forward(&mut g, &p, batch, false, &mut rng)?;
        let logits = g.value(t.logits).clone();
        let raw = g.value(t.pi);
        let (b, k) = raw.rows_cols();
        let mut pi = vec![0.0; b * NUM_EXPERTS];
        for i in 0..b {
            pi[i * NUM_EXPERTS..i * NUM_EXPERTS + k].copy_from_slice(raw.row(i));
        }
        Ok(Prediction {
            logits,
            pi: Tensor::new(vec![b, NUM_EXPERTS], pi)?,
        })
    }

    /// Eval-mode predictions for every record, in record order.
    pub fn predict_dataset(&self, ds: &Dataset, chunk: usize) -> Result<Prediction> {
        self.config.check_dataset(ds)?;
        if ds.is_empty() {
            return Err(DimeError::Input("cannot evaluate an empty dataset".into()));
        }
        let idx: Vec<usize> = (0..ds.len()).collect();
        let mut logits = Vec::with_capacity(ds.len() * NUM_CLASSES);
        let mut pi = Vec::with_capacity(ds.len() * NUM_EXPERTS);
        for part in idx.chunks(chunk.max(1)) {
            let pred = self.predict(&Batch::from_dataset(ds, part)?)?;
            logits.extend_from_slice(pred.logits.data());
            pi.extend_from_slice(pred.pi.data());
        }
        Ok(Prediction {
            logits: Tensor::new(vec![ds.len(), NUM_CLASSES], logits)?,
            pi: Tensor::new(vec![ds.len(), NUM_EXPERTS], pi)?,
        })
    }
}

pub const PARAM_GROUPS: [&str; 6] = [
    "frontend",
    "fusion.textual",
    "fusion.visual",
    "fusion.crossmodal",
    "gating",
    "classifier",
];

pub fn param_group(name: &str) -> &'static str {
    PARAM_GROUPS
        .iter()
        .copied()
        .find(|g| name.strip_prefix(g).is_some_and(|rest| rest.starts_with('.')))
        .unwrap_or("other")
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupCheck {
    pub group: &'static str,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
    pub passed: bool,
}

/// Per-group summary of a parameter-level report.
pub fn summarize_groups(report: &GradCheckReport) -> Vec<GroupCheck> {
    PARAM_GROUPS
        .iter()
        .map(|&group| {
            let mut out = GroupCheck {
                group,
                max_rel_err: 0.0,
                checked: 0,
                skipped: 0,
                passed: true,
            };
            for p in report.params.iter().filter(|p| param_group(&p.name) == group) {
                out.max_rel_err = out.max_rel_err.max(p.max_rel_err);
                out.checked += p.checked;
                out.skipped += p.skipped;
                out.passed &= p.passed;
            }
            out
        })
        .collect()
}

/// Random batch of `b` records for `model`'s input widths.
pub fn random_batch<R: Rng + ?Sized>(cfg: &ModelConfig, b: usize, rng: &mut R) -> Result<Batch> {
    let mut m = |d: usize| Tensor::new(vec![b, d], (0..b * d).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let input = FrontendInput {
        text: m(cfg.frontend.d_text_in)?,
        visual: m(cfg.frontend.d_visual_in)?,
        prompt: m(cfg.frontend.d_text_in)?,
    };
    let labels = (0..b).map(|_| rng.gen_range(0..NUM_CLASSES)).collect();
    Ok(Batch { input, labels })
}

/// Finite-difference check of the total training loss with respect to every
/// trainable parameter. Runs in training mode; the generator is reseeded
/// with `forward_seed` for each evaluation so dropout masks and the visual
/// prompt stay fixed across perturbations.
pub fn gradcheck_model(
    model: &DimeModel,
    batch: &Batch,
    forward_seed: u64,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let trainable: Vec<usize> = model
        .store
        .iter()
        .enumerate()
        .filter(|(_, p)| p.trainable)
        .map(|(i, _)| i)
        .collect();
    let named: Vec<(String, Tensor)> = trainable
        .iter()
        .map(|&i| {
            let p = model.store.iter().nth(i).expect("index in range");
            (p.name.clone(), p.value.clone())
        })
        .collect();
    check_gradients(
        &named,
        |g, vars| {
            let mut it = vars.iter();
            let all: Vec<Var> = model
                .store
                .iter()
                .map(|p| {
                    if p.trainable {
                        *it.next().expect("one var per trainable parameter")
                    } else {
                        g.constant(p.value.clone())
                    }
                })
                .collect();
            let p = model.store.bind_vars(all);
            let mut rng = ChaCha8Rng::seed_from_u64(forward_seed);
            Ok(model.forward(g, &p, batch, true, &mut rng)?.total)
        },
        cfg,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(ablate: bool) -> DimeModel {
        DimeModel::new(ModelConfig {
            ablate_alignment: ablate,
            ..ModelConfig::tiny(6, 5)
        })
        .unwrap()
    }

    #[test]
    fn forward_trace_is_consistent() {
        for ablate in [false, true] {
            let m = model(ablate);
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let batch = random_batch(&m.config, 4, &mut rng).unwrap();
            let mut g = Graph::new();
            let p = m.store.bind(&mut g);
            let t = m.forward(&mut g, &p, &batch, true, &mut rng).unwrap();
            let l = LossBreakdown::read(&g, &t);
            assert!((l.total - (l.l_t + l.l_v + l.l_s + l.l_ce)).abs() < 1e-9);
            assert_eq!(t.l_s.is_none(), ablate);
            assert_eq!(g.value(t.h).shape(), &[4, 4]);
            let pred = m.predict(&batch).unwrap();
            for i in 0..4 {
                let r = pred.pi.row(i);
                assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert_eq!(r[2] == 0.0, ablate);
            }
        }
    }

    #[test]
    fn predict_is_deterministic_and_chunking_is_transparent() {
        let m = model(false);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = random_batch(&m.config, 5, &mut rng).unwrap();
        assert_eq!(m.predict(&batch).unwrap(), m.predict(&batch).unwrap());
    }

    #[test]
    fn config_rejects_mismatched_widths() {
        let mut cfg = ModelConfig::tiny(6, 5);
        cfg.fusion.d_in = 7;
        assert!(DimeModel::new(cfg).is_err());
    }

    #[test]
    fn groups_partition_parameter_names() {
        let m = model(false);
        for p in m.store.iter() {
            assert_ne!(param_group(&p.name), "other", "{}", p.name);
        }
        assert_eq!(param_group("fusion.visualx.w"), "other");
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        for ablate in [false, true] {
            let m = model(ablate);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let batch = random_batch(&m.config, 2, &mut rng).unwrap();
            let report = gradcheck_model(&m, &batch, 17, &GradCheckConfig::default()).unwrap();
            let groups = summarize_groups(&report);
            for gc in &groups {
                assert!(gc.checked > 0, "{}", gc.group);
            }
            assert!(report.passed(), "{:?}", report.failures().collect::<Vec<_>>());
            assert!(report.max_rel_err() < 1e-4);
        }
    }
}
