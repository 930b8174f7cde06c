use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use dime_core::data::{
    generate_synthetic, load_dataset, save_dataset, split, Dataset, SplitMode, SplitSpec, Stance, SyntheticConfig,
};
use dime_core::metrics::EvalReport;
use dime_core::model::{gradcheck_model, random_batch, summarize_groups, Batch, DimeModel, ModelConfig};
use dime_core::tensor::GradCheckConfig;
use dime_core::trainer::{evaluate, load_checkpoint, save_checkpoint, train as run_training};
use dime_core::DimeError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::{EvalArgs, GenSynthArgs, GradcheckArgs, PartArg, PredictArgs, SplitArg, TrainArgs};

/// A check ran to completion but its numeric criterion was not met.
#[derive(Debug)]
pub struct NumericFailure(pub String);

impl std::fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    DimeError::Usage(msg.into()).into()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

pub fn gen_synth(a: GenSynthArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        n_per_class_per_target: a.n,
        targets: a.targets,
        d_text: a.d_text,
        d_visual: a.d_visual,
        dominance: a.mode.parse()?,
        noise_sigma: a.noise,
        seed: a.seed,
    };
    cfg.validate()?;
    let ds = generate_synthetic(&cfg)?;
    let out = a.out.unwrap_or_else(|| a.output_dir.join("synthetic.jsonl"));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    save_dataset(&ds, &out)?;

    let mut per_target: BTreeMap<&str, usize> = BTreeMap::new();
    let mut per_label = [0usize; 3];
    for r in &ds.records {
        *per_target.entry(&r.target).or_default() += 1;
        per_label[r.label.index()] += 1;
    }
    let targets: Vec<String> = per_target.iter().map(|(t, n)| format!("{t}={n}")).collect();
    let labels: Vec<String> = Stance::ALL
        .iter()
        .map(|s| format!("{}={}", s.name(), per_label[s.index()]))
        .collect();
    println!(
        "wrote {} records ({}; {}) to {}",
        ds.len(),
        targets.join(" "),
        labels.join(" "),
        out.display()
    );
    Ok(())
}

fn print_report(title: &str, r: &EvalReport) {
    println!("{title} (n={})", r.overall.n);
    print!("{}", r.table());
    let pi = r.overall.mean_pi;
    println!("mean gate weights: pi_t={:.3} pi_v={:.3} pi_tv={:.3}", pi[0], pi[1], pi[2]);
}

fn write_report(dir: &Path, stem: &str, r: &EvalReport) -> Result<()> {
    r.write(&dir.join(format!("{stem}.tsv")), &dir.join(format!("{stem}.jsonl")))?;
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p).map_err(|e| usage(format!("{e:#}")))?,
        None => RunConfig::default(),
    };
    cfg.apply(&a);
    if a.split == Some(SplitArg::All) {
        return Err(usage("train needs an in-target or zero-shot split"));
    }
    let data_path = cfg.dataset.clone().ok_or_else(|| usage("no dataset given (use --data or the config file)"))?;
    cfg.split.validate()?;
    cfg.train.validate()?;

    let ds = load_dataset(&data_path)?;
    cfg.model.frontend.d_text_in = ds.d_text;
    cfg.model.frontend.d_visual_in = ds.d_visual;
    let mut model = DimeModel::new(cfg.model.clone())?;
    let parts = split(&ds, &cfg.split)?;
    eprintln!(
        "training on {} records (dev {}, test {}), {} parameters",
        parts.train.len(),
        parts.dev.len(),
        parts.test.len(),
        model.store.num_scalars()
    );
    let outcome = run_training(&mut model, &parts.train, &parts.dev, &cfg.train, Some(cfg.split.clone()))?;
    let best = outcome.best.to_model()?;
    let dev = evaluate(&best, &parts.dev)?.0;
    let test = evaluate(&best, &parts.test)?.0;

    let dir = &cfg.output_dir;
    ensure_dir(dir)?;
    let json = serde_json::to_string_pretty(&cfg)?;
    write_file(&dir.join("run_config.json"), format!("{json}\n").as_bytes())?;
    save_checkpoint(&outcome.best, dir.join("best.ckpt"))?;
    outcome.history.write(&dir.join("history.tsv"))?;
    write_report(dir, "dev_report", &dev)?;
    write_report(dir, "test_report", &test)?;

    print!("{}", outcome.history.to_tsv());
    println!("best epoch {} (dev macro-F1 {:.4})", outcome.best.epoch, outcome.best.dev_macro_f1);
    print_report("test", &test);
    println!("outputs in {}", dir.display());
    Ok(())
}

fn select_part(ds: &Dataset, spec: Option<SplitSpec>, part: PartArg) -> Result<Dataset> {
    let Some(spec) = spec else { return Ok(ds.clone()) };
    let parts = split(ds, &spec)?;
    Ok(match part {
        PartArg::Train => parts.train,
        PartArg::Dev => parts.dev,
        PartArg::Test => parts.test,
    })
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let model = ckpt.to_model()?;
    let ds = load_dataset(&a.data)?;
    model.config.check_dataset(&ds)?;

    let spec = match a.split {
        Some(SplitArg::All) => None,
        mode => {
            let mut spec = ckpt.config.split.clone();
            if mode.is_some() || a.hold_out.is_some() || a.seed.is_some() {
                let s = spec.get_or_insert_with(SplitSpec::default);
                match mode {
                    Some(SplitArg::InTarget) => s.mode = SplitMode::InTarget,
                    Some(SplitArg::ZeroShot) => s.mode = SplitMode::ZeroShot,
                    _ => {}
                }
                if let Some(h) = &a.hold_out {
                    s.held_out_targets = h.clone();
                    if mode.is_none() {
                        s.mode = SplitMode::ZeroShot;
                    }
                }
                if let Some(seed) = a.seed {
                    s.seed = seed;
                }
                s.validate()?;
            }
            spec
        }
    };
    let subset = select_part(&ds, spec.clone(), a.part)?;
    let (report, _) = evaluate(&model, &subset)?;
    if let Some(dir) = &a.output_dir {
        ensure_dir(dir)?;
        let echo = serde_json::json!({
            "checkpoint": a.checkpoint,
            "dataset": a.data,
            "split": spec,
            "part": format!("{:?}", a.part).to_lowercase(),
            "model": model.config,
        });
        let json = serde_json::to_string_pretty(&echo)?;
        write_file(&dir.join("eval_config.json"), format!("{json}\n").as_bytes())?;
        write_report(dir, "eval_report", &report)?;
    }
    print_report("evaluation", &report);
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    if !(a.tol >= 0.0) || !(a.step > 0.0) || a.batch == 0 {
        return Err(usage("--tol must be >= 0, --step > 0 and --batch >= 1"));
    }
    let mut cfg = ModelConfig::tiny(a.d_text, a.d_visual);
    cfg.frontend.d_common = a.d_common;
    cfg.fusion.d_in = a.d_common;
    cfg.fusion.d_model = a.d_model;
    cfg.fusion.n_heads = a.heads;
    cfg.fusion.n_layers = a.layers;
    cfg.fusion.d_ffn = 2 * a.d_model;
    cfg.ablate_alignment = a.ablate_alignment;
    cfg.init_seed = a.seed;
    let model = DimeModel::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed.wrapping_add(1));
    let batch = random_batch(&model.config, a.batch, &mut rng)?;
    let gc = GradCheckConfig {
        h: a.step,
        tol: a.tol,
        ..GradCheckConfig::default()
    };
    let report = gradcheck_model(&model, &batch, a.seed.wrapping_add(2), &gc)?;
    println!("{:<20} {:>12} {:>8} {:>8}  status", "group", "max_rel_err", "checked", "skipped");
    let groups = summarize_groups(&report);
    for g in &groups {
        println!(
            "{:<20} {:>12.3e} {:>8} {:>8}  {}",
            g.group,
            g.max_rel_err,
            g.checked,
            g.skipped,
            if g.passed { "ok" } else { "FAIL" }
        );
    }
    if !report.passed() {
        let bad: Vec<&str> = groups.iter().filter(|g| !g.passed).map(|g| g.group).collect();
        bail!(NumericFailure(format!(
            "gradient check failed at tolerance {:e} for: {}",
            a.tol,
            bad.join(", ")
        )));
    }
    println!("all groups below {:e}", a.tol);
    Ok(())
}

pub fn predict(a: PredictArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?.to_model()?;
    let ds = load_dataset(&a.data)?;
    model.config.check_dataset(&ds)?;
    let idx = match &a.id {
        Some(id) => ds
            .records
            .iter()
            .position(|r| &r.id == id)
            .ok_or_else(|| DimeError::Input(format!("no record with id {id:?}")))?,
        None if ds.is_empty() => return Err(DimeError::Input("dataset has no records".into()).into()),
        None => 0,
    };
    let pred = model.predict(&Batch::from_dataset(&ds, &[idx])?)?;
    let logits = pred.logits.row(0);
    let probs = dime_core::tensor::ops::softmax_with_temperature(&dime_core::tensor::Tensor::vector(logits.to_vec()), 1.0)?;
    let label = pred.labels()[0];
    let rec = &ds.records[idx];
    let pi = pred.pi.row(0);
    let out = serde_json::json!({
        "id": rec.id,
        "target": rec.target,
        "stance": Stance::ALL[label].name(),
        "probs": probs.data(),
        "gate": { "pi_t": pi[0], "pi_v": pi[1], "pi_tv": pi[2] },
    });
    println!("{out}");
    Ok(())
}
