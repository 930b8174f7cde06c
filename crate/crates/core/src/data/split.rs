//! Stratified train/dev/test partitioning.
//!
//! Records are grouped by `(target, label)`. Each stratum receives the floor
//! of its exact quota per split; the leftover seats are then handed out so
//! that the split totals match a largest-remainder apportionment of the whole
//! dataset while no stratum deviates from its exact quota by a full record.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Stance};
use crate::error::{DimeError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    InTarget,
    ZeroShot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub mode: SplitMode,
    /// `(train, dev, test)`, summing to one.
    pub ratios: [f64; 3],
    #[serde(default)]
    pub held_out_targets: Vec<String>,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            mode: SplitMode::InTarget,
            ratios: [0.7, 0.1, 0.2],
            held_out_targets: Vec::new(),
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn in_target(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn zero_shot(held_out: Vec<String>, seed: u64) -> Self {
        Self {
            mode: SplitMode::ZeroShot,
            held_out_targets: held_out,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratios.iter().any(|r| !(*r > 0.0)) {
            return Err(DimeError::Parameter(format!(
                "split ratios must be positive, got {:?}",
                self.ratios
            )));
        }
        let total: f64 = self.ratios.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(DimeError::Parameter(format!(
                "split ratios must sum to 1, got {total}"
            )));
        }
        if self.mode == SplitMode::ZeroShot && self.held_out_targets.is_empty() {
            return Err(DimeError::Parameter(
                "zero-shot split needs at least one held-out target".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
}

pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<Splits> {
    match spec.mode {
        SplitMode::InTarget => split_in_target(ds, spec),
        SplitMode::ZeroShot => split_zero_shot(ds, spec),
    }
}

/// Per-stratum seat counts for each ratio. `sizes[s][k]` is the number of
/// records of stratum `s` assigned to split `k`.
pub(crate) fn apportion(strata: &[usize], ratios: &[f64]) -> Vec<Vec<usize>> {
    let total: usize = strata.iter().sum();
    let k = ratios.len();
    let split_totals = largest_remainder(total, ratios);

    let mut sizes: Vec<Vec<usize>> = Vec::with_capacity(strata.len());
    let mut fracs: Vec<Vec<f64>> = Vec::with_capacity(strata.len());
    for &n in strata {
        let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
        sizes.push(exact.iter().map(|e| e.floor() as usize).collect());
        fracs.push(exact.iter().map(|e| e - e.floor()).collect());
    }
    let mut demand: Vec<usize> = (0..k)
        .map(|j| split_totals[j] - sizes.iter().map(|s| s[j]).sum::<usize>())
        .collect();
    let leftover: Vec<usize> = strata
        .iter()
        .zip(&sizes)
        .map(|(n, s)| n - s.iter().sum::<usize>())
        .collect();

    // Strata with more leftover seats choose first; each hands at most one
    // extra seat to a split, preferring the splits with the most unmet demand.
    let mut order: Vec<usize> = (0..strata.len()).collect();
    order.sort_by(|&a, &b| leftover[b].cmp(&leftover[a]).then(a.cmp(&b)));
    for s in order {
        let mut choice: Vec<usize> = (0..k).collect();
        choice.sort_by(|&a, &b| {
            demand[b]
                .cmp(&demand[a])
                .then(fracs[s][b].total_cmp(&fracs[s][a]))
                .then(a.cmp(&b))
        });
        for &j in choice.iter().take(leftover[s]) {
            sizes[s][j] += 1;
            demand[j] = demand[j].saturating_sub(1);
        }
    }
    sizes
}

fn largest_remainder(total: usize, ratios: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = ratios.iter().map(|r| r * total as f64).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest = total - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    for j in order.into_iter().cycle() {
        if rest == 0 {
            break;
        }
        out[j] += 1;
        rest -= 1;
    }
    out
}

/// Stratified partition of `indices` into `ratios.len()` parts. Each part
/// lists record indices in ascending order.
fn stratified(ds: &Dataset, indices: &[usize], ratios: &[f64], seed: u64) -> Vec<Vec<usize>> {
    let mut strata: BTreeMap<(&str, Stance), Vec<usize>> = BTreeMap::new();
    for &i in indices {
        let r = &ds.records[i];
        strata.entry((r.target.as_str(), r.label)).or_default().push(i);
    }
    let sizes = apportion(&strata.values().map(Vec::len).collect::<Vec<_>>(), ratios);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts = vec![Vec::new(); ratios.len()];
    for (members, counts) in strata.into_values().zip(sizes) {
        let mut members = members;
        members.shuffle(&mut rng);
        let mut it = members.into_iter();
        for (part, c) in parts.iter_mut().zip(counts) {
            part.extend(it.by_ref().take(c));
        }
    }
    parts.iter_mut().for_each(|p| p.sort_unstable());
    parts
}

fn gather(ds: &Dataset, idx: &[usize]) -> Dataset {
    ds.with_records(idx.iter().map(|&i| ds.records[i].clone()).collect())
}

pub fn split_in_target(ds: &Dataset, spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    if spec.mode != SplitMode::InTarget {
        return Err(DimeError::Usage("split_in_target needs an in_target split spec".into()));
    }
    if ds.is_empty() {
        return Err(DimeError::Input("cannot split an empty dataset".into()));
    }
    let all: Vec<usize> = (0..ds.len()).collect();
    let parts = stratified(ds, &all, &spec.ratios, spec.seed);
    Ok(Splits {
        train: gather(ds, &parts[0]),
        dev: gather(ds, &parts[1]),
        test: gather(ds, &parts[2]),
    })
}

pub fn split_zero_shot(ds: &Dataset, spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    if spec.mode != SplitMode::ZeroShot {
        return Err(DimeError::Usage("split_zero_shot needs a zero_shot split spec".into()));
    }
    if ds.is_empty() {
        return Err(DimeError::Input("cannot split an empty dataset".into()));
    }
    let targets = ds.targets();
    for t in &spec.held_out_targets {
        if !targets.contains(t) {
            return Err(DimeError::Input(format!("held-out target {t:?} does not occur in the dataset")));
        }
    }
    let held = |t: &str| spec.held_out_targets.iter().any(|h| h == t);
    if targets.iter().all(|t| held(t)) {
        return Err(DimeError::Input(
            "held-out targets cover every target, leaving nothing to train on".into(),
        ));
    }
    let (test, rest): (Vec<usize>, Vec<usize>) =
        (0..ds.len()).partition(|&i| held(&ds.records[i].target));
    let norm = spec.ratios[0] + spec.ratios[1];
    let parts = stratified(ds, &rest, &[spec.ratios[0] / norm, spec.ratios[1] / norm], spec.seed);
    Ok(Splits {
        train: gather(ds, &parts[0]),
        dev: gather(ds, &parts[1]),
        test: gather(ds, &test),
    })
}
