//! Acceptance criteria 1 to 8. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use common::oracle::{concat_oracle, naive_rank, random_model, rotation_oracle, tirg_oracle, widen, Params};
use common::{normal_vec, rng, tiny_config, uniform_vec};
use composeae::composition::{rotate, ComplexVec, Composer};
use composeae::data::{gen_synthetic, load_dataset};
use composeae::evaluation::{rank_gallery, recall_at_k};
use composeae::losses::{self, batch_softmax_loss, soft_triplet_loss};
use composeae::numerics::grad_check;
use composeae::training::objective_grad_check;
use composeae::{BaseLoss, Checkpoint, LossWeights, Model, ModelParams, SynthConfig, Tape, Tensor, Trainer, Var, Variant};
use rand::Rng;
use rand_distr::StandardNormal;
use serde_json::Value;

const GRAD_TOL: f64 = 5e-3;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const ROTATION_TOL: f32 = 1e-5;
const ROTATION_DRAWS: usize = 10_000;
const LOSS_TOL: f32 = 1e-6;
const ORACLE_TOL: f64 = 1e-6;
const ORACLE_SEEDS: u64 = 20;
const MC_TRIALS: u64 = 50;
const CHANCE_MULTIPLE: f64 = 10.0;
const MIN_SEEDS: usize = 4;
const SEEDS: usize = 5;
const RUN_BUDGET: Duration = Duration::from_secs(600);

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn normal(r: &mut rand_chacha::ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| r.sample(StandardNormal)).collect()).unwrap()
}

fn weighted_sum(tape: &mut Tape<f64>, x: Var, salt: u64) -> composeae::Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let w = tape.constant(normal(&mut rng(0xace ^ salt), &shape));
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst: Vec<(String, f64)> = Vec::new();

    for (name, variant, conjugate) in [
        ("compose", Variant::Composeae, false),
        ("compose_conjugate", Variant::Composeae, true),
        ("tirg_compose", Variant::Tirg, false),
        ("concat_compose", Variant::Concat, false),
    ] {
        let cfg = tiny_config(variant);
        let mut max = 0.0f64;
        for seed in 0..5 {
            let params = ModelParams::init(&cfg, seed).map_err(|e| e.to_string())?;
            let named = params.named();
            let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
            let mut inputs: Vec<Tensor<f64>> = named.iter().map(|(_, t)| t.cast()).collect();
            let mut r = rng(500 + seed);
            inputs.push(normal(&mut r, &[2, cfg.d]));
            inputs.push(normal(&mut r, &[2, cfg.h]));
            let np = names.len();
            let err = grad_check(
                |t, v| {
                    let bound = params.map(&mut |name, _| v[names.iter().position(|n| n == name).unwrap()]);
                    let out = if conjugate {
                        bound.compose_conjugate(t, &cfg, v[np], v[np + 1])?.unwrap()
                    } else {
                        bound.compose(t, &cfg, v[np], v[np + 1])?
                    };
                    weighted_sum(t, out, seed)
                },
                &inputs,
                1e-6,
            )
            .map_err(|e| format!("{name}: {e}"))?;
            max = max.max(err);
        }
        worst.push((name.into(), max));
    }

    type Build = fn(&mut Tape<f64>, &[Var]) -> composeae::Result<Var>;
    let loss_cases: Vec<(&str, Vec<&[usize]>, Build)> = vec![
        ("soft_triplet", vec![&[6], &[6]], |t, v| losses::soft_triplet(t, v[0], v[1])),
        ("batch_softmax", vec![&[4, 4]], |t, v| losses::batch_softmax(t, v[0])),
        ("reconstruction", vec![&[3, 5], &[3, 5]], |t, v| losses::reconstruction(t, v[0], v[1])),
        ("symmetry", vec![&[4, 3], &[4, 3]], |t, v| losses::rotational_symmetry(t, BaseLoss::Smax, v[0], v[1], None, 3)),
        ("symmetry_st", vec![&[2, 3], &[2, 3], &[6, 3]], |t, v| {
            losses::rotational_symmetry(t, BaseLoss::St, v[0], v[1], Some(v[2]), 3)
        }),
        ("total", vec![&[1], &[1], &[1], &[1]], |t, v| {
            let w = LossWeights { lambda_sym: 0.5, lambda_ri: 0.1, lambda_rt: 0.2, ..Default::default() };
            losses::total(t, &w, v[0], Some(v[1]), Some(v[2]), Some(v[3]))
        }),
    ];
    for (name, shapes, build) in loss_cases {
        let mut max = 0.0f64;
        for seed in 0..20 {
            let mut r = rng(seed);
            let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| normal(&mut r, s)).collect();
            max = max.max(grad_check(build, &inputs, 1e-6).map_err(|e| format!("{name}: {e}"))?);
        }
        worst.push((name.into(), max));
    }

    for variant in Variant::ALL {
        for base in [BaseLoss::Smax, BaseLoss::St] {
            let weights = LossWeights { lambda_sym: 0.3, lambda_ri: 0.1, lambda_rt: 0.1, ..Default::default() };
            let report = objective_grad_check(&tiny_config(variant), &weights, base, 3, 7).map_err(|e| e.to_string())?;
            worst.push((format!("objective {variant} {base:?}"), report.max_rel_error));
        }
    }

    let elapsed = start.elapsed();
    let (name, max) = worst.iter().cloned().fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    ensure(max <= GRAD_TOL, format!("{name}: relative error {max:e} > {GRAD_TOL:e}"))?;
    ensure(elapsed <= GRAD_BUDGET, format!("took {elapsed:.1?}"))?;
    Ok(format!("{} checks, max rel err {max:.2e} ({name}), {elapsed:.1?}", worst.len()))
}

fn rotation_invariants() -> Outcome {
    let mut model = Model::new(tiny_config(Variant::Composeae), 4).map_err(|e| e.to_string())?;
    if let Composer::Rotation(p) = &mut model.params.composer {
        p.gamma.output.weight.data_mut().iter_mut().for_each(|w| *w *= 40.0);
    }
    let mut r = rng(21);
    let (mut modulus, mut iso, mut inv) = (0.0f32, 0.0f32, 0.0f32);
    for _ in 0..ROTATION_DRAWS {
        let q = normal_vec(&mut r, 3);
        let (_, delta) = model.text_to_rotation(&q).map_err(|e| e.to_string())?;
        for i in 0..delta.len() {
            modulus = modulus.max((delta.modulus(i) - 1.0).abs());
        }
    }
    let k = 8;
    for _ in 0..ROTATION_DRAWS {
        let delta = ComplexVec::from_angles(&uniform_vec(&mut r, k, -10.0, 10.0));
        let v = ComplexVec::from_interleaved(normal_vec(&mut r, 2 * k)).unwrap();
        let out = rotate(&delta, &v).unwrap();
        let back = rotate(&delta.conj(), &out).unwrap();
        for i in 0..k {
            iso = iso.max((out.modulus(i) - v.modulus(i)).abs());
            let (a, b) = (back.get(i), v.get(i));
            inv = inv.max((a.0 - b.0).abs()).max((a.1 - b.1).abs());
        }
    }
    ensure(modulus <= ROTATION_TOL, format!("unit modulus {modulus:e}"))?;
    ensure(iso <= ROTATION_TOL, format!("isometry {iso:e}"))?;
    ensure(inv <= ROTATION_TOL, format!("conjugate inverse {inv:e}"))?;
    Ok(format!("{ROTATION_DRAWS} draws: modulus {modulus:.1e}, isometry {iso:.1e}, inverse {inv:.1e}"))
}

fn loss_closed_forms() -> Outcome {
    let err = |e: composeae::Error| e.to_string();
    let cases = [
        ("soft triplet, equal similarities", soft_triplet_loss(&[0.4, -2.0, 1.1], &[0.4, -2.0, 1.1]).map_err(err)?, 2f32.ln()),
        ("softmax, uniform N = 6", batch_softmax_loss(&vec![vec![-0.3; 6]; 6]).map_err(err)?, 6f32.ln()),
        ("softmax, N = 1", batch_softmax_loss(&[vec![3.5]]).map_err(err)?, 0.0),
        ("softmax, [[2,0],[0,2]]", batch_softmax_loss(&[vec![2.0, 0.0], vec![0.0, 2.0]]).map_err(err)?, (1.0 + (-2f32).exp()).ln()),
    ];
    let mut details = Vec::new();
    for (name, got, want) in cases {
        let e = (got - want).abs();
        ensure(e <= LOSS_TOL, format!("{name}: {got} vs {want}"))?;
        details.push(format!("{e:.0e}"));
    }
    Ok(format!("4 cases, errors [{}]", details.join(", ")))
}

fn scalar_oracle() -> Outcome {
    let mut worst = 0.0f64;
    let mut compare = |got: &[f32], want: &[f64], what: &str| -> Result<(), String> {
        ensure(got.len() == want.len(), format!("{what}: length"))?;
        for (&g, &w) in got.iter().zip(want) {
            let e = (g as f64 - w).abs() / w.abs().max(1.0);
            worst = worst.max(e);
            ensure(e <= ORACLE_TOL, format!("{what}: {g} vs oracle {w}"))?;
        }
        Ok(())
    };
    for seed in 0..ORACLE_SEEDS {
        let mut r = rng(seed.wrapping_mul(7919) + 1);
        let z = uniform_vec(&mut r, 4, -1.5, 1.5);
        let q = uniform_vec(&mut r, 3, -1.5, 1.5);
        for variant in [Variant::Composeae, Variant::ComposeaeNoRho, Variant::ComposeaeNoRhoconv] {
            let m = random_model(variant, seed);
            let p = Params::of(&m);
            let got = m.compose(&z, &q).map_err(|e| e.to_string())?;
            compare(&got, &rotation_oracle(&p, &m.config, &widen(&z), &widen(&q), 1.0), &format!("{variant} seed {seed}"))?;
        }
        let m = random_model(Variant::Composeae, seed);
        let p = Params::of(&m);
        let got = m.compose_conjugate(&z, &q).map_err(|e| e.to_string())?;
        compare(&got, &rotation_oracle(&p, &m.config, &widen(&z), &widen(&q), -1.0), "conjugate")?;
        let (z_hat, q_hat) = m.decode(&z).map_err(|e| e.to_string())?;
        compare(&z_hat, &p.mlp("dec_img", &widen(&z)), "dec_img")?;
        compare(&q_hat, &p.mlp("dec_txt", &widen(&z)), "dec_txt")?;
        let m = random_model(Variant::Tirg, seed);
        let got = m.tirg_compose(&z, &q).map_err(|e| e.to_string())?;
        compare(&got, &tirg_oracle(&Params::of(&m), &widen(&z), &widen(&q)), "tirg")?;
        let m = random_model(Variant::Concat, seed);
        let got = m.concat_compose(&z, &q).map_err(|e| e.to_string())?;
        compare(&got, &concat_oracle(&Params::of(&m), &widen(&z), &widen(&q)), "concat")?;
    }
    Ok(format!("{ORACLE_SEEDS} seeds, max rel err {worst:.1e}"))
}

fn retrieval_oracle() -> Outcome {
    let mut r = rng(17);
    let gallery = normal_vec(&mut r, 300 * 8);
    for _ in 0..100 {
        let q = normal_vec(&mut r, 8);
        ensure(rank_gallery(&q, &gallery).unwrap() == naive_rank(&q, &gallery), "ranking differs from naive sort")?;
    }
    let (n, g, d) = (100, 200, 8);
    let ks = [1, 5, 10, 50];
    let mut sums = [0.0f64; 4];
    for t in 0..MC_TRIALS {
        let ds = gen_synthetic(&SynthConfig { n, g, d, h: 3, k_true: 4, seed: 2000 + t, ..Default::default() })
            .map_err(|e| e.to_string())?;
        let emb = normal_vec(&mut rng(t), n * d);
        let report = recall_at_k(&emb, &ds, &ks, false).map_err(|e| e.to_string())?;
        for (s, x) in sums.iter_mut().zip(&report.recall) {
            *s += x.recall;
        }
    }
    let mut details = Vec::new();
    for (&k, s) in ks.iter().zip(sums) {
        let p = k as f64 / g as f64;
        let mean = s / MC_TRIALS as f64;
        let se = (p * (1.0 - p) / (n as f64 * MC_TRIALS as f64)).sqrt();
        let z = (mean - p) / se;
        ensure(z.abs() <= 3.0, format!("k={k}: {mean} vs {p}, {z:.2} SE"))?;
        details.push(format!("k={k} {z:+.2} SE"));
    }
    Ok(format!("exact ranking; {}", details.join(", ")))
}

struct Planted {
    dir: PathBuf,
    data: Result<(), String>,
    single: Result<Duration, String>,
    ablation: Result<(), String>,
}

fn cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_composeae"))
        .args(args)
        .current_dir(dir)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(
        out.status.success(),
        format!("composeae {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()),
    )
}

fn config_path(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name).to_string_lossy().into_owned()
}

fn planted_runs(dir: &Path) -> Planted {
    let data = cli(dir, &["synth", "--config", &config_path("planted.json"), "--out", "data"]);
    let (mut single, mut ablation) = (Err("no data".to_string()), Err("no data".to_string()));
    if data.is_ok() {
        let start = Instant::now();
        single = cli(dir, &["train", "--config", &config_path("planted.json"), "--out", "single"]).map(|_| start.elapsed());
        ablation = cli(dir, &["train", "--config", &config_path("ablation.json"), "--out", "ablation"]);
    }
    Planted { dir: dir.to_path_buf(), data, single, ablation }
}

fn read_json(path: &Path) -> Result<Value, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn planted_recall(p: &Planted) -> Outcome {
    p.data.clone()?;
    let train = load_dataset(p.dir.join("data/train.json")).map_err(|e| e.to_string())?;
    let held = load_dataset(p.dir.join("data/heldout.json")).map_err(|e| e.to_string())?;
    ensure(
        (train.n, held.n, held.g) == (2000, 500, 500),
        format!("split is n {} / held-out n {} g {}", train.n, held.n, held.g),
    )?;
    let elapsed = p.single.clone()?;
    let per_run = elapsed / SEEDS as u32;
    ensure(per_run <= RUN_BUDGET, format!("{per_run:.1?} per run"))?;
    let summary = read_json(&p.dir.join("single/summary.json"))?;
    let recalls: Vec<f64> = summary["runs"]
        .as_array()
        .ok_or("summary has no runs")?
        .iter()
        .map(|r| r["final"]["recall@10"].as_f64().unwrap_or(0.0))
        .collect();
    ensure(recalls.len() == SEEDS, format!("{} runs", recalls.len()))?;
    let threshold = CHANCE_MULTIPLE * 10.0 / held.g as f64;
    let good = recalls.iter().filter(|&&r| r >= threshold).count();
    let detail = format!("R@10 {recalls:?}, {good}/{SEEDS} >= {threshold:.2}, {per_run:.1?} per run");
    ensure(good >= MIN_SEEDS, detail.clone())?;
    Ok(detail)
}

fn ablation_direction(p: &Planted) -> Outcome {
    p.ablation.clone()?;
    let report = read_json(&p.dir.join("ablation/ablation.json"))?;
    let rows = report["rows"].as_array().ok_or("no rows")?;
    let mean = |name: &str| -> Result<f64, String> {
        rows.iter()
            .find(|r| r["name"] == name)
            .and_then(|r| r["recall"]["recall@10"]["mean"].as_f64())
            .ok_or(format!("missing row {name}"))
    };
    let (full, no_sym, concat) = (mean("composeae")?, mean("composeae_no_sym")?, mean("concat")?);
    let detail = format!("mean R@10 composeae {full:.3}, no_sym {no_sym:.3}, concat {concat:.3}");
    ensure(full >= no_sym && full >= concat, detail.clone())?;
    let flagged = report["comparisons"]
        .as_array()
        .ok_or("no comparisons")?
        .iter()
        .filter(|c| c["metric"] == "recall@10")
        .all(|c| c["reference_at_least_row"] == true);
    ensure(flagged, "report comparisons disagree")?;
    Ok(detail)
}

fn determinism(p: &Planted) -> Outcome {
    p.single.clone()?;
    p.ablation.clone()?;
    for r in 0..SEEDS {
        let a = fs::read(p.dir.join(format!("single/repeat-{r}/checkpoint.ckpt"))).map_err(|e| e.to_string())?;
        let b = fs::read(p.dir.join(format!("ablation/ablation/composeae/repeat-{r}/checkpoint.ckpt"))).map_err(|e| e.to_string())?;
        ensure(a == b, format!("seed {r}: checkpoints differ between two runs"))?;
    }

    let train = load_dataset(p.dir.join("data/train.json")).map_err(|e| e.to_string())?;
    let held = load_dataset(p.dir.join("data/heldout.json")).map_err(|e| e.to_string())?;
    let resolved = read_json(&p.dir.join("single/resolved-config.json"))?;
    let mut cfg: composeae::TrainConfig =
        serde_json::from_value(Value::Object(resolved.as_object().unwrap().iter().filter(|(k, _)| {
            !["synth", "held_out", "data", "checkpoint", "ablation", "gradcheck"].contains(&k.as_str())
        }).map(|(k, v)| (k.clone(), v.clone())).collect()))
        .map_err(|e| e.to_string())?;
    cfg.epochs = 6;
    cfg.eval_every = 2;
    cfg.repeats = 1;
    let mut full = Trainer::new(cfg.clone(), &train, Some(&held)).map_err(|e| e.to_string())?;
    full.run().map_err(|e| e.to_string())?;
    let (full, full_hist) = full.finish();

    let mut first = Trainer::new(cfg, &train, Some(&held)).map_err(|e| e.to_string())?;
    for _ in 0..3 {
        first.run_epoch().map_err(|e| e.to_string())?;
    }
    let path = p.dir.join("mid.ckpt");
    first.checkpoint().save(&path).map_err(|e| e.to_string())?;
    let mut records = first.history().records.clone();
    drop(first);
    let ckpt = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    let mut second = Trainer::from_checkpoint(ckpt, &train, Some(&held)).map_err(|e| e.to_string())?;
    second.run().map_err(|e| e.to_string())?;
    let (resumed, hist) = second.finish();
    records.extend(hist.records);
    let bits = |c: &Checkpoint| -> Vec<u32> {
        c.model.params.leaves().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
    };
    ensure(bits(&full) == bits(&resumed) && full == resumed, "resumed parameters differ")?;
    ensure(records == full_hist.records, "resumed metrics differ")?;
    Ok(format!("{SEEDS} checkpoint pairs byte-identical; 3+3 epoch resume bitwise equal"))
}

fn report(n: usize, name: &str, outcome: Outcome) -> bool {
    match outcome {
        Ok(detail) => {
            println!("criterion {n} {name}: PASS ({detail})");
            true
        }
        Err(detail) => {
            println!("criterion {n} {name}: FAIL ({detail})");
            false
        }
    }
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        Err(e.downcast_ref::<String>().cloned().or(e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or("panic".into()))
    })
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    // Only the `--list` probe from the test runner; no criteria listed.
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let tmp = tempfile::tempdir().expect("temporary directory");
    let mut passed = 0;
    passed += report(1, "gradient suite", guarded(gradient_suite)) as usize;
    passed += report(2, "rotation invariants", guarded(rotation_invariants)) as usize;
    passed += report(3, "loss closed forms", guarded(loss_closed_forms)) as usize;
    passed += report(4, "scalar oracle", guarded(scalar_oracle)) as usize;
    passed += report(5, "retrieval oracle", guarded(retrieval_oracle)) as usize;
    let planted = planted_runs(tmp.path());
    passed += report(6, "planted held-out recall", guarded(|| planted_recall(&planted))) as usize;
    passed += report(7, "ablation direction", guarded(|| ablation_direction(&planted))) as usize;
    passed += report(8, "determinism", guarded(|| determinism(&planted))) as usize;
    println!("acceptance: {passed}/8 criteria passed");
    if passed != 8 {
        std::process::exit(1);
    }
}
