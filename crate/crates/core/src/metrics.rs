//! Macro-F1, confusion matrices and per-target evaluation reports.
//!
//! Per-class precision, recall and F1 are 0 whenever their denominator is 0.
//! A class absent from both gold and predictions scores 0 and is flagged.
//! The dataset-level `avg_macro_f1` is the unweighted mean of per-target
//! scores; `macro_f1` pools all records.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{write_atomic, EmbeddingRecord, LABEL_NAMES, NUM_CLASSES};
use crate::error::{DimeError, Result};
use crate::gating::NUM_EXPERTS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// `counts[gold][pred]`.
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn from_labels(gold: &[usize], pred: &[usize]) -> Result<Self> {
        if gold.len() != pred.len() {
            return Err(DimeError::Input(format!(
                "gold has {} labels but pred has {}",
                gold.len(),
                pred.len()
            )));
        }
        let mut m = Self::default();
        for (i, (&gl, &pl)) in gold.iter().zip(pred).enumerate() {
            if gl >= NUM_CLASSES || pl >= NUM_CLASSES {
                return Err(DimeError::Input(format!("label pair {i} ({gl}, {pl}) is out of range")));
            }
            m.counts[gl][pl] += 1;
        }
        Ok(m)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// `(precision, recall, f1)` for class `c`.
    pub fn class_scores(&self, c: usize) -> (f64, f64, f64) {
        let tp = self.counts[c][c] as f64;
        let predicted: u64 = (0..NUM_CLASSES).map(|g| self.counts[g][c]).sum();
        let actual: u64 = self.counts[c].iter().sum();
        let ratio = |n: f64, d: u64| if d == 0 { 0.0 } else { n / d as f64 };
        let p = ratio(tp, predicted);
        let r = ratio(tp, actual);
        let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        (p, r, f1)
    }

    /// Classes that occur in neither gold nor predictions.
    pub fn absent_classes(&self) -> Vec<usize> {
        (0..NUM_CLASSES)
            .filter(|&c| self.counts[c].iter().sum::<u64>() == 0 && (0..NUM_CLASSES).all(|g| self.counts[g][c] == 0))
            .collect()
    }

    pub fn macro_f1(&self) -> f64 {
        (0..NUM_CLASSES).map(|c| self.class_scores(c).2).sum::<f64>() / NUM_CLASSES as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MacroF1 {
    pub value: f64,
    pub per_class: [f64; NUM_CLASSES],
    /// Classes scored 0 because they never occur.
    pub absent: Vec<usize>,
}

pub fn macro_f1_detailed(gold: &[usize], pred: &[usize]) -> Result<MacroF1> {
    let m = ConfusionMatrix::from_labels(gold, pred)?;
    Ok(MacroF1 {
        value: m.macro_f1(),
        per_class: [0, 1, 2].map(|c| m.class_scores(c).2),
        absent: m.absent_classes(),
    })
}

pub fn macro_f1(gold: &[usize], pred: &[usize]) -> Result<f64> {
    Ok(macro_f1_detailed(gold, pred)?.value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScopeReport {
    /// Target name, or `"ALL"` for the pooled scope.
    pub scope: String,
    pub n: usize,
    pub macro_f1: f64,
    pub per_class_f1: [f64; NUM_CLASSES],
    pub absent_classes: Vec<usize>,
    pub confusion: ConfusionMatrix,
    /// Mean `[pi_t, pi_v, pi_tv]`; zeros when no gate weights were supplied.
    pub mean_pi: [f64; NUM_EXPERTS],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: ScopeReport,
    /// Sorted by target name.
    pub targets: Vec<ScopeReport>,
    /// Unweighted mean of per-target macro-F1.
    pub avg_macro_f1: f64,
}

fn scope(name: &str, gold: &[usize], pred: &[usize], pi: &[[f64; NUM_EXPERTS]]) -> Result<ScopeReport> {
    let d = macro_f1_detailed(gold, pred)?;
    let mut mean_pi = [0.0; NUM_EXPERTS];
    if !pi.is_empty() {
        for row in pi {
            for (m, x) in mean_pi.iter_mut().zip(row) {
                *m += x;
            }
        }
        mean_pi.iter_mut().for_each(|m| *m /= pi.len() as f64);
    }
    Ok(ScopeReport {
        scope: name.to_string(),
        n: gold.len(),
        macro_f1: d.value,
        per_class_f1: d.per_class,
        absent_classes: d.absent,
        confusion: ConfusionMatrix::from_labels(gold, pred)?,
        mean_pi,
    })
}

/// Builds the report from parallel slices. `pi` is either empty or has one
/// row per record.
pub fn report_from_parts(
    targets: &[&str],
    gold: &[usize],
    pred: &[usize],
    pi: &[[f64; NUM_EXPERTS]],
) -> Result<EvalReport> {
    if targets.len() != gold.len() || gold.len() != pred.len() || !(pi.is_empty() || pi.len() == gold.len()) {
        return Err(DimeError::Input("report inputs disagree on the number of records".into()));
    }
    if gold.is_empty() {
        return Err(DimeError::Input("cannot report on zero records".into()));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, t) in targets.iter().enumerate() {
        groups.entry(t).or_default().push(i);
    }
    let mut per_target = Vec::with_capacity(groups.len());
    for (t, idx) in &groups {
        let g: Vec<usize> = idx.iter().map(|&i| gold[i]).collect();
        let p: Vec<usize> = idx.iter().map(|&i| pred[i]).collect();
        let w: Vec<[f64; NUM_EXPERTS]> = if pi.is_empty() { Vec::new() } else { idx.iter().map(|&i| pi[i]).collect() };
        per_target.push(scope(t, &g, &p, &w)?);
    }
    let avg = per_target.iter().map(|s| s.macro_f1).sum::<f64>() / per_target.len() as f64;
    Ok(EvalReport {
        overall: scope("ALL", gold, pred, pi)?,
        targets: per_target,
        avg_macro_f1: avg,
    })
}

pub fn per_target_report(
    records: &[EmbeddingRecord],
    preds: &[usize],
    pi: &[[f64; NUM_EXPERTS]],
) -> Result<EvalReport> {
    let targets: Vec<&str> = records.iter().map(|r| r.target.as_str()).collect();
    let gold: Vec<usize> = records.iter().map(|r| r.label.index()).collect();
    report_from_parts(&targets, &gold, preds, pi)
}

impl EvalReport {
    /// Tab-separated summary: one row per target, then the pooled and
    /// averaged rows.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("scope\tn\tmacro_f1");
        for name in LABEL_NAMES {
            write!(s, "\tf1_{}", name.to_lowercase()).unwrap();
        }
        s.push_str("\tpi_t\tpi_v\tpi_tv\n");
        for r in self.targets.iter().chain(std::iter::once(&self.overall)) {
            write!(s, "{}\t{}\t{:.6}", r.scope, r.n, r.macro_f1).unwrap();
            for f in r.per_class_f1 {
                write!(s, "\t{f:.6}").unwrap();
            }
            for p in r.mean_pi {
                write!(s, "\t{p:.6}").unwrap();
            }
            s.push('\n');
        }
        writeln!(s, "AVG\t{}\t{:.6}", self.overall.n, self.avg_macro_f1).unwrap();
        s
    }

    /// One JSON object per scope, targets first, then the pooled scope with
    /// the target average attached.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.targets {
            s.push_str(&serde_json::to_string(r).expect("report serializes"));
            s.push('\n');
        }
        let mut all = serde_json::to_value(&self.overall).expect("report serializes");
        all["avg_macro_f1"] = serde_json::json!(self.avg_macro_f1);
        s.push_str(&all.to_string());
        s.push('\n');
        s
    }

    /// Human-readable layout with targets as columns and `Avg.` last.
    pub fn table(&self) -> String {
        let mut head = String::from("         ");
        let mut row = String::from("macro-F1 ");
        for t in &self.targets {
            let w = t.scope.len().max(6);
            write!(head, " {:>w$}", t.scope).unwrap();
            write!(row, " {:>w$.2}", 100.0 * t.macro_f1).unwrap();
        }
        write!(head, " {:>6} {:>6}", "Avg.", "All").unwrap();
        write!(row, " {:>6.2} {:>6.2}", 100.0 * self.avg_macro_f1, 100.0 * self.overall.macro_f1).unwrap();
        format!("{head}\n{row}\n")
    }

    pub fn write(&self, tsv: &Path, jsonl: &Path) -> Result<()> {
        write_atomic(tsv, self.to_tsv().as_bytes())?;
        write_atomic(jsonl, self.to_jsonl().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent per-class count and `2tp / (2tp + fp + fn)` formula.
    fn naive_macro_f1(gold: &[usize], pred: &[usize]) -> f64 {
        let mut total = 0.0;
        for c in 0..3 {
            let tp = gold.iter().zip(pred).filter(|(g, p)| **g == c && **p == c).count() as f64;
            let fp = gold.iter().zip(pred).filter(|(g, p)| **g != c && **p == c).count() as f64;
            let fnn = gold.iter().zip(pred).filter(|(g, p)| **g == c && **p != c).count() as f64;
            let den = 2.0 * tp + fp + fnn;
            total += if den == 0.0 { 0.0 } else { 2.0 * tp / den };
        }
        total / 3.0
    }

    #[test]
    fn hand_examples() {
        assert_eq!(macro_f1(&[0, 1, 2, 2], &[0, 1, 2, 2]).unwrap(), 1.0);
        assert_eq!(macro_f1(&[0, 1, 2], &[1, 2, 0]).unwrap(), 0.0);
        let d = macro_f1_detailed(&[0, 0, 1, 2], &[0, 1, 1, 2]).unwrap();
        assert!((d.value - 0.7778).abs() < 1e-4);
        assert!((d.per_class[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((d.per_class[1] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(d.per_class[2], 1.0);
        // Always predicting class 0 on a balanced set.
        let gold: Vec<usize> = (0..30).map(|i| i % 3).collect();
        assert!((macro_f1(&gold, &[0; 30]).unwrap() - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn absent_class_is_flagged() {
        let d = macro_f1_detailed(&[0, 1], &[0, 1]).unwrap();
        assert_eq!(d.absent, vec![2]);
        assert!((d.value - 2.0 / 3.0).abs() < 1e-12);
        assert!(macro_f1(&[0], &[0, 1]).is_err());
        assert!(macro_f1(&[3], &[0]).is_err());
    }

    #[test]
    fn exhaustive_agreement_up_to_length_six() {
        let mut gold = Vec::new();
        let mut pred = Vec::new();
        for n in 0..=6usize {
            for code in 0..9usize.pow(n as u32) {
                gold.clear();
                pred.clear();
                let mut c = code;
                for _ in 0..n {
                    gold.push(c % 3);
                    pred.push((c / 3) % 3);
                    c /= 9;
                }
                let got = macro_f1(&gold, &pred).unwrap();
                let want = naive_macro_f1(&gold, &pred);
                assert!((got - want).abs() < 1e-12, "{gold:?} {pred:?}: {got} vs {want}");
            }
        }
    }

    fn naive_report(targets: &[&str], gold: &[usize], pred: &[usize]) -> (f64, Vec<(String, f64)>, f64) {
        let mut names: Vec<&str> = targets.to_vec();
        names.sort();
        names.dedup();
        let per: Vec<(String, f64)> = names
            .iter()
            .map(|t| {
                let idx: Vec<usize> = (0..targets.len()).filter(|&i| targets[i] == *t).collect();
                let g: Vec<usize> = idx.iter().map(|&i| gold[i]).collect();
                let p: Vec<usize> = idx.iter().map(|&i| pred[i]).collect();
                (t.to_string(), naive_macro_f1(&g, &p))
            })
            .collect();
        let avg = per.iter().map(|(_, f)| f).sum::<f64>() / per.len() as f64;
        (naive_macro_f1(gold, pred), per, avg)
    }

    #[test]
    fn randomized_reports_match_naive_implementation() {
        let names = ["A", "B", "C"];
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let targets: Vec<&str> = (0..50).map(|_| names[rng.gen_range(0..3)]).collect();
            let gold: Vec<usize> = (0..50).map(|_| rng.gen_range(0..3)).collect();
            let pred: Vec<usize> = (0..50).map(|_| rng.gen_range(0..3)).collect();
            let r = report_from_parts(&targets, &gold, &pred, &[]).unwrap();
            let (pooled, per, avg) = naive_report(&targets, &gold, &pred);
            assert!((r.overall.macro_f1 - pooled).abs() < 1e-12);
            assert!((r.avg_macro_f1 - avg).abs() < 1e-12);
            assert_eq!(r.targets.len(), per.len());
            for (s, (name, f)) in r.targets.iter().zip(&per) {
                assert_eq!(&s.scope, name);
                assert!((s.macro_f1 - f).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn report_conventions() {
        let gold = [0, 1, 2, 0, 1, 2];
        let pred = [0, 1, 2, 0, 0, 0];
        let single = report_from_parts(&["X"; 6], &gold, &pred, &[]).unwrap();
        assert_eq!(single.targets[0].macro_f1, macro_f1(&gold, &pred).unwrap());
        assert_eq!(single.avg_macro_f1, single.overall.macro_f1);

        // Target A is perfect, target B scores 0.5 exactly.
        let targets = ["A", "A", "A", "B", "B", "B", "B"];
        let gold = [0, 1, 2, 0, 0, 1, 1];
        let pred = [0, 1, 2, 0, 0, 0, 0];
        let pi = [[0.5, 0.25, 0.25]; 7];
        let r = report_from_parts(&targets, &gold, &pred, &pi).unwrap();
        assert_eq!(r.targets[0].macro_f1, 1.0);
        let b = &r.targets[1];
        // Class 0: P = 1/2, R = 1, F1 = 2/3; class 1: 0; class 2 absent: 0.
        assert!((b.macro_f1 - 2.0 / 9.0).abs() < 1e-12);
        assert_eq!(b.absent_classes, vec![2]);
        assert_eq!(r.overall.confusion.total(), 7);
        assert_eq!(r.overall.mean_pi, [0.5, 0.25, 0.25]);

        // Per-target scores 1.0 and 0.5 average to 0.75.
        let targets = ["A", "A", "A", "B", "B", "B", "B"];
        let gold = [0, 1, 2, 0, 1, 1, 2];
        let pred = [0, 1, 2, 0, 1, 2, 1];
        let two = report_from_parts(&targets, &gold, &pred, &[]).unwrap();
        assert_eq!(two.targets[0].macro_f1, 1.0);
        assert!((two.targets[1].macro_f1 - 0.5).abs() < 1e-15);
        assert!((two.avg_macro_f1 - 0.75).abs() < 1e-15);
    }

    #[test]
    fn serialized_forms_are_stable() {
        let r = report_from_parts(&["A", "B", "B"], &[0, 1, 2], &[0, 1, 1], &[[0.2, 0.3, 0.5]; 3]).unwrap();
        let tsv = r.to_tsv();
        assert_eq!(tsv.lines().count(), 1 + 2 + 1 + 1);
        assert!(tsv.starts_with("scope\tn\tmacro_f1\tf1_favor"));
        let lines: Vec<serde_json::Value> = r.to_jsonl().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[2]["scope"], "ALL");
        assert!(lines[2]["avg_macro_f1"].is_number());
        assert!(r.table().contains("Avg."));
    }

    proptest! {
        #[test]
        fn bounded_and_label_permutation_invariant(
            pairs in prop::collection::vec((0usize..3, 0usize..3), 0..40),
            perm in Just([0usize, 1, 2]).prop_shuffle(),
        ) {
            let gold: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let pred: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let f = macro_f1(&gold, &pred).unwrap();
            prop_assert!((0.0..=1.0).contains(&f));
            let pg: Vec<usize> = gold.iter().map(|&c| perm[c]).collect();
            let pp: Vec<usize> = pred.iter().map(|&c| perm[c]).collect();
            prop_assert!((macro_f1(&pg, &pp).unwrap() - f).abs() < 1e-12);
        }
    }
}
