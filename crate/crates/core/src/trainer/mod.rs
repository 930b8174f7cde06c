//! Mini-batch training with dev-set model selection, evaluation, and
//! checkpoint persistence.

mod adam;
mod checkpoint;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{write_atomic, Dataset, SplitSpec};
use crate::error::{DimeError, Result};
use crate::gating::NUM_EXPERTS;
use crate::metrics::{per_target_report, EvalReport};
use crate::model::{Batch, DimeModel, LossBreakdown, Prediction};
use crate::params::ParamStore;
use crate::tensor::Graph;

pub use adam::{clip_global_norm, Adam, AdamConfig};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointConfig, RngState, CHECKPOINT_VERSION, MAGIC,
};

/// Rows per eval-mode forward pass.
pub const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// Parameters are rounded to single precision after every update.
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a dev macro-F1 improvement before stopping.
    pub patience: usize,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            betas: (0.9, 0.999),
            weight_decay: 0.0,
            batch_size: 32,
            max_epochs: 15,
            patience: 5,
            clip_norm: Some(5.0),
            seed: 0,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DimeError::Parameter(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be >= 0, got {}", self.lr));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("betas must lie in [0, 1), got {:?}", self.betas));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0".into());
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch_size, max_epochs and patience must be positive".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip_norm must be > 0, got {c}"));
            }
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            betas: self.betas,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Record-weighted means over the epoch's training batches.
    pub losses: LossBreakdown,
    pub dev_macro_f1: f64,
    /// Mean `[pi_t, pi_v, pi_tv]` over the dev set.
    pub dev_mean_pi: [f64; NUM_EXPERTS],
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\tl_t\tl_v\tl_s\tl_ce\tl_total\tdev_macro_f1\tpi_t\tpi_v\tpi_tv\n");
        for e in &self.epochs {
            let l = &e.losses;
            write!(
                s,
                "{}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{:.6}",
                e.epoch, l.l_t, l.l_v, l.l_s, l.l_ce, l.total, e.dev_macro_f1
            )
            .unwrap();
            for p in e.dev_mean_pi {
                write!(s, "\t{p:.6}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_tsv().as_bytes())
    }

    /// Epoch with the highest dev macro-F1, earliest on ties.
    pub fn best_epoch(&self) -> Option<&EpochRecord> {
        self.epochs
            .iter()
            .fold(None, |best: Option<&EpochRecord>, e| match best {
                Some(b) if b.dev_macro_f1 >= e.dev_macro_f1 => Some(b),
                _ => Some(e),
            })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub history: History,
}

fn round_to_f32(store: &mut ParamStore) {
    for p in store.iter_mut().filter(|p| p.trainable) {
        p.value.data_mut().iter_mut().for_each(|x| *x = *x as f32 as f64);
    }
}

/// Trains `model` in place and returns the best dev checkpoint plus the
/// per-epoch history. `split` is only recorded in the checkpoint.
pub fn train(
    model: &mut DimeModel,
    train_ds: &Dataset,
    dev_ds: &Dataset,
    cfg: &TrainConfig,
    split: Option<SplitSpec>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_ds.is_empty() || dev_ds.is_empty() {
        return Err(DimeError::Input("training and dev sets must be nonempty".into()));
    }
    model.config.check_dataset(train_ds)?;
    model.config.check_dataset(dev_ds)?;
    train_ds.validate()?;
    dev_ds.validate()?;

    if cfg.precision == Precision::F32 {
        round_to_f32(&mut model.store);
    }
    let ckpt_config = CheckpointConfig {
        model: model.config.clone(),
        split,
        train: Some(cfg.clone()),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(&model.store, cfg.adam());
    let mut order: Vec<usize> = (0..train_ds.len()).collect();
    let mut history = History::default();
    let mut best: Option<Checkpoint> = None;
    let mut since_best = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = Batch::from_dataset(train_ds, idx)?;
            let mut g = Graph::new();
            let p = model.store.bind(&mut g);
            let trace = model.forward(&mut g, &p, &batch, true, &mut rng)?;
            let l = LossBreakdown::read(&g, &trace);
            if ![l.l_t, l.l_v, l.l_s, l.l_ce, l.total].iter().all(|x| x.is_finite()) {
                return Err(DimeError::NonFinite { epoch, batch: bi });
            }
            g.backward(trace.total)?;
            let mut grads: Vec<Option<Vec<f64>>> = p.vars().iter().map(|&v| g.grad(v).map(<[f64]>::to_vec)).collect();
            if let Some(c) = cfg.clip_norm {
                let norm = clip_global_norm(&mut grads, c);
                if !norm.is_finite() {
                    return Err(DimeError::NonFinite { epoch, batch: bi });
                }
            }
            opt.step(&mut model.store, &grads);
            if cfg.precision == Precision::F32 {
                round_to_f32(&mut model.store);
            }
            let w = idx.len() as f64;
            sums.l_t += w * l.l_t;
            sums.l_v += w * l.l_v;
            sums.l_s += w * l.l_s;
            sums.l_ce += w * l.l_ce;
            sums.total += w * l.total;
        }
        let n = train_ds.len() as f64;
        let losses = LossBreakdown {
            l_t: sums.l_t / n,
            l_v: sums.l_v / n,
            l_s: sums.l_s / n,
            l_ce: sums.l_ce / n,
            total: sums.total / n,
        };

        let report = evaluate(model, dev_ds)?.0;
        let dev_f1 = report.overall.macro_f1;
        history.epochs.push(EpochRecord {
            epoch,
            losses,
            dev_macro_f1: dev_f1,
            dev_mean_pi: report.overall.mean_pi,
        });
        if best.as_ref().is_none_or(|b| dev_f1 > b.dev_macro_f1) {
            best = Some(Checkpoint::from_model(
                model,
                ckpt_config.clone(),
                RngState::capture(&rng),
                epoch,
                dev_f1,
            ));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        best: best.expect("at least one epoch ran"),
        history,
    })
}

/// Eval-mode report over `ds` plus the raw predictions, in record order.
pub fn evaluate(model: &DimeModel, ds: &Dataset) -> Result<(EvalReport, Prediction)> {
    let pred = model.predict_dataset(ds, EVAL_CHUNK)?;
    let labels = pred.labels();
    let pi: Vec<[f64; NUM_EXPERTS]> = (0..ds.len())
        .map(|i| pred.pi.row(i).try_into().expect("three gate weights"))
        .collect();
    let report = per_target_report(&ds.records, &labels, &pi)?;
    Ok((report, pred))
}
