//! Embedding datasets: record types, the line-delimited file format, the
//! in-target and zero-shot split protocols, and a synthetic generator.

mod format;
mod split;
mod synth;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{DimeError, Result};

pub use format::{load_dataset, save_dataset, FORMAT_VERSION};
pub(crate) use format::write_atomic;
pub use split::{split, split_in_target, split_zero_shot, SplitMode, SplitSpec, Splits};
pub use synth::{generate_synthetic, Dominance, SyntheticConfig};

pub const NUM_CLASSES: usize = 3;
pub const LABEL_NAMES: [&str; NUM_CLASSES] = ["Favor", "Against", "Neutral"];

/// Stance label with the fixed integer coding used in files and logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stance {
    Favor = 0,
    Against = 1,
    Neutral = 2,
}

impl Stance {
    pub const ALL: [Stance; NUM_CLASSES] = [Stance::Favor, Stance::Against, Stance::Neutral];

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        LABEL_NAMES[self.index()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    pub target: String,
    pub label: Stance,
    /// Content embedding of post text plus rationale.
    pub e_text: Vec<f32>,
    pub e_visual: Vec<f32>,
    /// Per-record prompt embedding; falls back to the dataset default.
    pub e_prompt: Option<Vec<f32>>,
    /// Provenance only, never read by the model.
    pub meta: Option<BTreeMap<String, String>>,
}

impl Serialize for Stance {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(*self as u8)
    }
}

impl<'de> Deserialize<'de> for Stance {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = u64::deserialize(d)?;
        Stance::from_index(v as usize)
            .ok_or_else(|| serde::de::Error::custom(format!("label {v} is not one of 0, 1, 2")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<EmbeddingRecord>,
    pub d_text: usize,
    pub d_visual: usize,
    pub default_prompt_embedding: Option<Vec<f32>>,
}

impl Dataset {
    pub fn new(d_text: usize, d_visual: usize, default_prompt_embedding: Option<Vec<f32>>) -> Self {
        Self {
            records: Vec::new(),
            d_text,
            d_visual,
            default_prompt_embedding,
        }
    }

    /// Same dimensions and default prompt, different records.
    pub fn with_records(&self, records: Vec<EmbeddingRecord>) -> Self {
        Self {
            records,
            d_text: self.d_text,
            d_visual: self.d_visual,
            default_prompt_embedding: self.default_prompt_embedding.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct targets in sorted order.
    pub fn targets(&self) -> Vec<String> {
        self.records
            .iter()
            .map(|r| r.target.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn prompt_for<'a>(&'a self, rec: &'a EmbeddingRecord) -> Option<&'a [f32]> {
        rec.e_prompt
            .as_deref()
            .or(self.default_prompt_embedding.as_deref())
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(p) = &self.default_prompt_embedding {
            check_vec("default_prompt_embedding", "dataset header", p, self.d_text)?;
        }
        for r in &self.records {
            self.validate_record(r)?;
        }
        Ok(())
    }

    pub(crate) fn validate_record(&self, r: &EmbeddingRecord) -> Result<()> {
        check_vec("e_text", &r.id, &r.e_text, self.d_text)?;
        check_vec("e_visual", &r.id, &r.e_visual, self.d_visual)?;
        match &r.e_prompt {
            Some(p) => check_vec("e_prompt", &r.id, p, self.d_text)?,
            None if self.default_prompt_embedding.is_none() => {
                return Err(DimeError::Input(format!(
                    "record {}: no e_prompt and no dataset default_prompt_embedding",
                    r.id
                )))
            }
            None => {}
        }
        Ok(())
    }
}

fn check_vec(field: &str, owner: &str, v: &[f32], expected: usize) -> Result<()> {
    if v.len() != expected {
        return Err(DimeError::Input(format!(
            "{owner}: {field} has length {} but the dataset declares {expected}",
            v.len()
        )));
    }
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(DimeError::Input(format!("{owner}: {field}[{i}] is not finite")));
    }
    Ok(())
}
