use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use dime_core::data::{SplitMode, SplitSpec};
use dime_core::model::ModelConfig;
use dime_core::trainer::{Precision, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::{PrecisionArg, SplitArg, TrainArgs};

pub const DEFAULT_OUTPUT_DIR: &str = "dime-out";

/// Everything needed to reproduce a training run. Echoed to
/// `run_config.json` in the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            output_dir: PathBuf::from(DEFAULT_OUTPUT_DIR),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            split: SplitSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing run config {}", path.display()))
    }

    /// Applies command-line overrides; flags win over the file.
    pub fn apply(&mut self, a: &TrainArgs) {
        if let Some(d) = &a.data {
            self.dataset = Some(d.clone());
        }
        if let Some(d) = &a.output_dir {
            self.output_dir = d.clone();
        }
        match a.split {
            Some(SplitArg::ZeroShot) => self.split.mode = SplitMode::ZeroShot,
            Some(SplitArg::InTarget) => self.split.mode = SplitMode::InTarget,
            Some(SplitArg::All) | None => {}
        }
        if let Some(h) = &a.hold_out {
            self.split.held_out_targets = h.clone();
            if a.split.is_none() {
                self.split.mode = SplitMode::ZeroShot;
            }
        }
        if let Some(s) = a.seed {
            self.split.seed = s;
            self.train.seed = s;
            self.model.init_seed = s;
        }
        let t = &mut self.train;
        set(&mut t.lr, a.lr);
        set(&mut t.weight_decay, a.weight_decay);
        set(&mut t.batch_size, a.batch_size);
        set(&mut t.max_epochs, a.epochs);
        set(&mut t.patience, a.patience);
        if a.clip_norm.is_some() {
            t.clip_norm = a.clip_norm;
        }
        if a.no_clip {
            t.clip_norm = None;
        }
        if let Some(p) = a.precision {
            t.precision = match p {
                PrecisionArg::F32 => Precision::F32,
                PrecisionArg::F64 => Precision::F64,
            };
        }
        let m = &mut self.model;
        if let Some(d) = a.d_common {
            m.frontend.d_common = d;
            m.fusion.d_in = d;
        }
        set(&mut m.fusion.d_model, a.d_model);
        set(&mut m.fusion.n_heads, a.heads);
        set(&mut m.fusion.n_layers, a.layers);
        set(&mut m.fusion.d_ffn, a.d_ffn);
        set(&mut m.fusion.dropout_p, a.dropout);
        set(&mut m.experts.margin, a.margin);
        set(&mut m.gating.tau, a.tau);
        set(&mut m.gating.d_hidden, a.gate_hidden);
        if a.ablate_alignment {
            m.ablate_alignment = true;
        }
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}
