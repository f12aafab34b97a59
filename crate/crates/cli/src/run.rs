use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use composeae::composition::HiddenSizes;
use composeae::data::{gen_synthetic, load_dataset};
use composeae::evaluation::evaluate;
use composeae::training::{objective_grad_check, summarize, MeanStd};
use composeae::{BaseLoss, Checkpoint, FeatureDataset, MetricsHistory, ModelConfig, TrainConfig, Trainer, Variant};
use serde::Serialize;
use serde_json::{json, Value};

use crate::command::{Command, Verb};
use crate::config::{apply_override, parse_value, RunConfig};
use crate::selftest;

/// Largest relative error `gradcheck` accepts.
pub const GRADCHECK_TOL: f64 = 5e-3;

/// Reads the config file (if any), applies overrides in order and validates
/// the result.
pub fn resolve_config(cmd: &Command) -> anyhow::Result<RunConfig> {
    let mut value = match &cmd.config_path {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("config {} is not valid JSON", path.display()))?
        }
        None => Value::Object(Default::default()),
    };
    for (key, raw) in &cmd.overrides {
        apply_override(&mut value, key, parse_value(raw))?;
    }
    RunConfig::from_json(value)
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

/// Runs one command; everything it produces goes under `cmd.output_dir`.
pub fn run(cmd: &Command) -> anyhow::Result<()> {
    let cfg = resolve_config(cmd)?;
    let out = &cmd.output_dir;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    write_json(&out.join("resolved-config.json"), &cfg.to_json())?;
    match cmd.verb {
        Verb::Synth => synth(&cfg, out),
        Verb::Train => train(&cfg, out),
        Verb::Eval => eval(&cfg, out),
        Verb::Gradcheck => gradcheck(&cfg),
        Verb::Selftest => run_selftest(),
    }
}

fn synth(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let ds = gen_synthetic(&cfg.run.synth)?;
    let held = cfg.run.held_out;
    if held == 0 {
        ds.save(out.join("train.json"))?;
        println!("{}", json!({ "train": out.join("train.json"), "n": ds.n, "g": ds.g }));
    } else {
        if held >= ds.n {
            bail!(composeae::Error::Config(format!("held_out = {held} leaves no training samples out of {}", ds.n)));
        }
        let (train, heldout) = ds.split_at(ds.n - held)?;
        train.save(out.join("train.json"))?;
        heldout.save(out.join("heldout.json"))?;
        println!(
            "{}",
            json!({
                "train": out.join("train.json"), "n": train.n, "g": train.g,
                "heldout": out.join("heldout.json"), "heldout_n": heldout.n, "heldout_g": heldout.g,
            })
        );
    }
    Ok(())
}

fn load(path: &Option<PathBuf>, what: &str) -> anyhow::Result<Option<FeatureDataset>> {
    path.as_ref()
        .map(|p| load_dataset(p).with_context(|| format!("loading {what} dataset {}", p.display())))
        .transpose()
}

#[derive(Serialize)]
struct RunSummary {
    seed: u64,
    #[serde(rename = "final")]
    final_metrics: BTreeMap<String, f64>,
}

#[derive(Serialize)]
struct Summary {
    variant: Variant,
    base_loss: BaseLoss,
    repeats: usize,
    runs: Vec<RunSummary>,
    /// Mean and sample standard deviation of each final metric over repeats.
    metrics: BTreeMap<String, MeanStd>,
}

/// Trains `config.repeats` runs with seeds `seed, seed + 1, ...` into
/// `dir/repeat-<r>/` and writes `dir/summary.json`.
fn train_repeats(config: &TrainConfig, train: &FeatureDataset, eval: Option<&FeatureDataset>, dir: &Path) -> anyhow::Result<Vec<MetricsHistory>> {
    let mut histories = Vec::with_capacity(config.repeats);
    for r in 0..config.repeats {
        let mut run_cfg = config.clone();
        run_cfg.seed = config.seed + r as u64;
        let run_dir = dir.join(format!("repeat-{r}"));
        fs::create_dir_all(&run_dir)?;
        let mut trainer = Trainer::new(run_cfg, train, eval)?;
        let mut metrics = fs::File::create(run_dir.join("metrics.jsonl"))?;
        while trainer.epoch() < config.epochs {
            let record = trainer.run_epoch()?;
            writeln!(metrics, "{}", serde_json::to_string(&record)?)?;
        }
        let (checkpoint, history) = trainer.finish();
        checkpoint.save(run_dir.join("checkpoint.ckpt"))?;
        histories.push(history);
    }
    let summary = Summary {
        variant: config.model.variant,
        base_loss: histories[0].base_loss,
        repeats: config.repeats,
        runs: histories.iter().map(|h| RunSummary { seed: h.seed, final_metrics: h.final_metrics() }).collect(),
        metrics: summarize(&histories),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(histories)
}

#[derive(Serialize)]
struct AblationEntry {
    name: String,
    variant: Variant,
    /// Effective symmetry weight; 0 for variants without the symmetry term.
    lambda_sym: f32,
    /// Final recall@k per repeat, keyed by `recall@k`.
    per_seed: BTreeMap<String, Vec<f64>>,
    recall: BTreeMap<String, MeanStd>,
}

#[derive(Serialize)]
struct Comparison {
    reference: String,
    row: String,
    metric: String,
    reference_mean: f64,
    row_mean: f64,
    reference_at_least_row: bool,
}

fn train(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let Some(train) = load(&cfg.run.data.train, "training")? else {
        bail!(composeae::Error::Config("data.train must name a CRF1 manifest".into()));
    };
    let eval = load(&cfg.run.data.eval, "evaluation")?;
    if cfg.run.ablation.is_empty() {
        let histories = train_repeats(&cfg.train, &train, eval.as_ref(), out)?;
        println!("{}", json!({ "summary": out.join("summary.json"), "metrics": summarize(&histories) }));
        return Ok(());
    }

    let mut rows = Vec::new();
    for row in &cfg.run.ablation {
        let mut row_cfg = cfg.train.clone();
        row_cfg.model.variant = row.variant;
        if let Some(l) = row.lambda_sym {
            row_cfg.weights.lambda_sym = l;
        }
        let dir = out.join("ablation").join(&row.name);
        let histories = train_repeats(&row_cfg, &train, eval.as_ref(), &dir)?;
        let mut per_seed: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for h in &histories {
            for (k, v) in h.final_metrics() {
                if k.starts_with("recall@") {
                    per_seed.entry(k).or_default().push(v);
                }
            }
        }
        let recall = summarize(&histories).into_iter().filter(|(k, _)| k.starts_with("recall@")).collect();
        rows.push(AblationEntry {
            name: row.name.clone(),
            variant: row.variant,
            lambda_sym: if row.variant.uses_symmetry() { row_cfg.weights.lambda_sym } else { 0.0 },
            per_seed,
            recall,
        });
    }
    let reference = &rows[0];
    let comparisons: Vec<Comparison> = rows[1..]
        .iter()
        .flat_map(|row| {
            reference.recall.iter().filter_map(move |(metric, r)| {
                row.recall.get(metric).map(|o| Comparison {
                    reference: reference.name.clone(),
                    row: row.name.clone(),
                    metric: metric.clone(),
                    reference_mean: r.mean,
                    row_mean: o.mean,
                    reference_at_least_row: r.mean >= o.mean,
                })
            })
        })
        .collect();
    write_json(&out.join("ablation.json"), &json!({ "rows": rows, "comparisons": comparisons }))?;
    println!("{}", json!({ "ablation": out.join("ablation.json") }));
    Ok(())
}

fn eval(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let Some(path) = &cfg.run.checkpoint else {
        bail!(composeae::Error::Config("checkpoint must name a checkpoint file".into()));
    };
    let checkpoint = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let dataset = match load(&cfg.run.data.eval, "evaluation")? {
        Some(ds) => ds,
        None => load(&cfg.run.data.train, "training")?
            .ok_or_else(|| composeae::Error::Config("data.eval or data.train must name a dataset".into()))?,
    };
    let report = evaluate(&checkpoint.model, &dataset, &cfg.train.ks, cfg.train.normalize)?;
    write_json(&out.join("report.json"), &report)?;
    let recall: BTreeMap<String, f64> = report.recall.iter().map(|r| (format!("recall@{}", r.k), r.recall)).collect();
    println!("{}", json!({ "report": out.join("report.json"), "recall": recall, "warnings": report.warnings }));
    Ok(())
}

/// Model dimensions used by `gradcheck`.
pub fn tiny_model(variant: Variant) -> ModelConfig {
    ModelConfig {
        d: 4,
        h: 3,
        k: 2,
        hidden: HiddenSizes { gamma: 5, eta: 5, rho: 5, decoder: 5, rho_conv_fc: 6, baseline: 5 },
        conv_filters: 2,
        conv_len: 3,
        conv_kernel: 3,
        variant,
    }
}

fn gradcheck(cfg: &RunConfig) -> anyhow::Result<()> {
    let mut worst = 0.0f64;
    for variant in Variant::ALL {
        for base in [BaseLoss::Smax, BaseLoss::St] {
            let report = objective_grad_check(&tiny_model(variant), &cfg.train.weights, base, cfg.run.gradcheck.batch, cfg.run.gradcheck.seed)?;
            println!(
                "{}",
                json!({ "variant": variant, "base_loss": base, "max_rel_error": report.max_rel_error, "coordinates": report.coordinates })
            );
            worst = worst.max(report.max_rel_error);
        }
    }
    println!("{}", json!({ "max_rel_error": worst, "tolerance": GRADCHECK_TOL }));
    if worst > GRADCHECK_TOL {
        bail!(composeae::Error::Numeric(format!("gradient check error {worst:e} exceeds {GRADCHECK_TOL:e}")));
    }
    Ok(())
}

fn run_selftest() -> anyhow::Result<()> {
    let results = selftest::run_all();
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    for r in &results {
        println!("{} {} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    println!("{}", json!({ "checks": results.len(), "failed": failed.len() }));
    if !failed.is_empty() {
        bail!("{} selftest checks failed: {}", failed.len(), failed.join(", "));
    }
    Ok(())
}
