//! Hand-evaluated examples for every module, runnable from the binary.

use std::f32::consts::{LN_2, PI};

use anyhow::ensure;
use composeae::composition::{rotate, ComplexVec, Composer};
use composeae::data::{gen_synthetic, gen_synthetic_with_truth, load_dataset, sample_batch, sample_negatives};
use composeae::evaluation::{rank_gallery, recall_at_k, similarity};
use composeae::losses::{
    batch_softmax_loss, reconstruction_loss, rotational_symmetry_loss, soft_triplet_loss, total_loss, LossComponents,
};
use composeae::numerics::{grad_check, sgd_momentum_step, OptimState};
use composeae::{BaseLoss, LossWeights, Model, SynthConfig, Tape, Tensor, Variant};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::command::parse_command;
use crate::run::tiny_model;

pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn() -> anyhow::Result<String>;

fn close(a: f32, b: f32, tol: f32) -> bool {
    (a - b).abs() <= tol
}

fn model_with(variant: Variant, edit: impl FnOnce(&mut Model)) -> Model {
    let mut m = Model::new(tiny_model(variant), 1).expect("tiny config is valid");
    edit(&mut m);
    m
}

fn rotation_params(m: &mut Model) -> &mut composeae::composition::ComposeAEParams<Tensor<f32>> {
    match &mut m.params.composer {
        Composer::Rotation(p) => p,
        _ => unreachable!("rotation variant"),
    }
}

fn zero(t: &mut Tensor<f32>) {
    t.data_mut().iter_mut().for_each(|v| *v = 0.0);
}

fn fill(t: &mut Tensor<f32>, v: f32) {
    t.data_mut().iter_mut().for_each(|x| *x = v);
}

const Z: [f32; 4] = [0.3, -1.2, 0.7, 2.0];
const Q: [f32; 3] = [1.0, -0.5, 0.25];

fn checks() -> Vec<(&'static str, Check)> {
    vec![
        ("square_gradient", || {
            let mut t = Tape::<f32>::new();
            let w = t.param(Tensor::scalar(3.0));
            let y = t.mul(w, w)?;
            let g = t.backward(y)?;
            let (v, d) = (t.value(y).item().unwrap_or(f32::NAN), g.get(w).expect("param gradient").item().unwrap_or(f32::NAN));
            ensure!(v == 9.0 && d == 6.0, "value {v}, gradient {d}");
            Ok(format!("value {v} gradient {d}"))
        }),
        ("relu_subgradient", || {
            let mut t = Tape::<f32>::new();
            let w = t.param(Tensor::vector(vec![-1.0, 2.0]));
            let r = t.relu(w);
            let s = t.sum(r);
            let g = t.backward(s)?;
            let grad = g.get(w).expect("param gradient").data().to_vec();
            ensure!(t.value(s).item().unwrap_or(f32::NAN) == 2.0 && grad == [0.0, 1.0], "{grad:?}");
            Ok(format!("gradient {grad:?}"))
        }),
        ("sgd_plain_step", || {
            let mut p = Tensor::scalar(1.0);
            let mut st = OptimState::new(0.1, 0.0, [&[1usize][..]])?;
            sgd_momentum_step(&mut [&mut p], &[Tensor::scalar(2.0)], &mut st)?;
            ensure!(close(p.item().unwrap_or(f32::NAN), 0.8, 1e-7), "p = {}", p.item().unwrap_or(f32::NAN));
            Ok(format!("p = {}", p.item().unwrap_or(f32::NAN)))
        }),
        ("sgd_momentum_two_steps", || {
            let mut p = Tensor::scalar(0.0);
            let mut st = OptimState::new(0.1, 0.9, [&[1usize][..]])?;
            sgd_momentum_step(&mut [&mut p], &[Tensor::scalar(1.0)], &mut st)?;
            ensure!(close(p.item().unwrap_or(f32::NAN), -0.1, 1e-7) && st.velocity()[0].item().unwrap_or(f32::NAN) == 1.0, "step 1");
            sgd_momentum_step(&mut [&mut p], &[Tensor::scalar(1.0)], &mut st)?;
            let v = st.velocity()[0].item().unwrap_or(f32::NAN);
            ensure!(close(p.item().unwrap_or(f32::NAN), -0.29, 1e-6) && close(v, 1.9, 1e-6), "p {} v {v}", p.item().unwrap_or(f32::NAN));
            Ok(format!("p = {} v = {v}", p.item().unwrap_or(f32::NAN)))
        }),
        ("grad_check_quadratic", || {
            let e = grad_check(
                |t: &mut Tape<f64>, v| {
                    let sq = t.mul(v[0], v[0])?;
                    Ok(t.sum(sq))
                },
                &[Tensor::vector(vec![1.0, 2.0])],
                1e-3,
            )?;
            ensure!(e <= 1e-6, "{e:e}");
            Ok(format!("{e:e}"))
        }),
        ("grad_check_sine", || {
            let e = grad_check(
                |t: &mut Tape<f64>, v| {
                    let s = t.sin(v[0]);
                    Ok(t.sum(s))
                },
                &[Tensor::vector(vec![0.0, std::f64::consts::FRAC_PI_2])],
                1e-3,
            )?;
            ensure!(e <= 1e-5, "{e:e}");
            Ok(format!("{e:e}"))
        }),
        ("zero_angle_identity_rotation", || {
            let m = model_with(Variant::Composeae, |m| {
                let p = rotation_params(m);
                zero(&mut p.gamma.output.weight);
                zero(&mut p.gamma.output.bias);
            });
            let (_, delta) = m.text_to_rotation(&Q)?;
            ensure!((0..delta.len()).all(|i| delta.get(i) == (1.0, 0.0)), "{delta:?}");
            ensure!(m.compose(&Z, &Q)? == m.compose_conjugate(&Z, &Q)?, "conjugate differs");
            Ok("delta = 1, conjugate = compose".into())
        }),
        ("half_turn", || {
            let d = ComplexVec::from_angles(&[PI]);
            let (re, im) = d.get(0);
            ensure!(close(re, -1.0, 1e-6) && close(im, 0.0, 1e-6), "({re}, {im})");
            Ok(format!("({re}, {im})"))
        }),
        ("quarter_turn", || {
            let out = rotate(&ComplexVec::from_pairs(&[(0.0, 1.0)])?, &ComplexVec::from_pairs(&[(1.0, 0.0)])?)?;
            ensure!(out.get(0) == (0.0, 1.0), "{:?}", out.get(0));
            let v = ComplexVec::from_pairs(&[(0.5, -2.0), (3.0, 1.0)])?;
            ensure!(rotate(&ComplexVec::from_angles(&[0.0, 0.0]), &v)? == v, "identity rotation");
            Ok("(0, 1)".into())
        }),
        ("branch_isolation", || {
            let only_rho = model_with(Variant::Composeae, |m| zero(&mut rotation_params(m).b));
            let reference = model_with(Variant::ComposeaeNoRhoconv, |_| {});
            ensure!(only_rho.compose(&Z, &Q)? == reference.compose(&Z, &Q)?, "b = 0 differs from a * rho");
            let none = model_with(Variant::Composeae, |m| {
                let p = rotation_params(m);
                zero(&mut p.a);
                zero(&mut p.b);
            });
            ensure!(none.compose(&Z, &Q)?.iter().all(|v| *v == 0.0), "a = b = 0 is not zero");
            Ok("b = 0 gives a*rho; a = b = 0 gives 0".into())
        }),
        ("affine_decoders", || {
            let m = model_with(Variant::Composeae, |m| {
                zero(&mut m.params.dec_img.output.weight);
                fill(&mut m.params.dec_img.output.bias, 0.75);
            });
            let (z_hat, q_hat) = m.decode(&Z)?;
            ensure!(z_hat == [0.75; 4] && q_hat.len() == 3, "{z_hat:?}");
            Ok(format!("{z_hat:?}"))
        }),
        ("tirg_pass_through", || {
            let m = model_with(Variant::Tirg, |m| {
                let Composer::Tirg(p) = &mut m.params.composer else { unreachable!() };
                zero(&mut p.w_res);
                zero(&mut p.gate.output.weight);
                fill(&mut p.gate.output.bias, 1e4);
                fill(&mut p.w_gate, 2.0);
            });
            let out = m.tirg_compose(&Z, &Q)?;
            ensure!(out.iter().zip(Z).all(|(o, z)| *o == 2.0 * z), "{out:?}");
            Ok(format!("{out:?}"))
        }),
        ("concat_constant", || {
            let m = model_with(Variant::Concat, |m| {
                let Composer::Concat(p) = &mut m.params.composer else { unreachable!() };
                zero(&mut p.output.weight);
                fill(&mut p.output.bias, -0.5);
            });
            let out = m.concat_compose(&Z, &Q)?;
            ensure!(out == [-0.5; 4], "{out:?}");
            Ok(format!("{out:?}"))
        }),
        ("soft_triplet_closed_forms", || {
            let sym = soft_triplet_loss(&[0.3, -1.0], &[0.3, -1.0])?;
            let sat = soft_triplet_loss(&[20.0], &[0.0])?;
            let one = soft_triplet_loss(&[1.0], &[0.0])?;
            ensure!(close(sym, LN_2, 1e-6) && sat <= 1e-8 && close(one, 0.3133, 1e-4), "{sym} {sat} {one}");
            Ok(format!("{sym} {sat:e} {one}"))
        }),
        ("batch_softmax_closed_forms", || {
            let n1 = batch_softmax_loss(&[vec![4.0]])?;
            let diag = batch_softmax_loss(&[vec![2.0, 0.0], vec![0.0, 2.0]])?;
            let uniform = batch_softmax_loss(&vec![vec![0.7; 5]; 5])?;
            let want = (1.0f32 + (-2.0f32).exp()).ln();
            ensure!(n1 == 0.0 && close(diag, want, 1e-6) && close(uniform, 5f32.ln(), 1e-6), "{n1} {diag} {uniform}");
            Ok(format!("{n1} {diag} {uniform}"))
        }),
        ("reconstruction_closed_forms", || {
            let same = reconstruction_loss(&[vec![1.0, 2.0]], &[vec![1.0, 2.0]])?;
            let four = reconstruction_loss(&[vec![1.0; 4]], &[vec![0.0; 4]])?;
            let five = reconstruction_loss(&[vec![2.0, 0.0], vec![0.0, 6f32.sqrt()]], &[vec![0.0; 2], vec![0.0; 2]])?;
            ensure!(same == 0.0 && four == 4.0 && close(five, 5.0, 1e-6), "{same} {four} {five}");
            Ok(format!("{same} {four} {five}"))
        }),
        ("symmetry_closed_forms", || {
            let s = 2.0f32;
            let z: Vec<Vec<f32>> = (0..3).map(|i| (0..3).map(|j| if i == j { s.sqrt() } else { 0.0 }).collect()).collect();
            let smax = rotational_symmetry_loss(&z, &z, BaseLoss::Smax, None)?;
            let want = (1.0 + 2.0 * (-s).exp()).ln();
            let single = rotational_symmetry_loss(&[vec![1.0, 2.0]], &[vec![3.0, 4.0]], BaseLoss::Smax, None)?;
            let st = rotational_symmetry_loss(&[vec![1.0, 0.0]], &[vec![0.5, 0.0]], BaseLoss::St, Some(&[vec![vec![0.5, 3.0]]]))?;
            ensure!(close(smax, want, 1e-6) && single == 0.0 && close(st, LN_2, 1e-6), "{smax} {single} {st}");
            Ok(format!("{smax} {single} {st}"))
        }),
        ("total_loss_closed_forms", || {
            let c = LossComponents { base: 1.0, sym: 2.0, ri: 3.0, rt: 4.0 };
            let w = LossWeights { lambda_sym: 0.5, lambda_ri: 0.1, lambda_rt: 0.1, ..Default::default() };
            let t = total_loss(c, &w)?;
            let zero_w = LossWeights { lambda_sym: 0.0, lambda_ri: 0.0, lambda_rt: 0.0, ..Default::default() };
            let b = total_loss(c, &zero_w)?;
            ensure!(close(t, 2.7, 1e-6) && b == 1.0, "{t} {b}");
            ensure!(total_loss(LossComponents::default(), &w)? == 0.0, "zero components");
            Ok(format!("{t} {b}"))
        }),
        ("dataset_round_trip", || {
            let ds = gen_synthetic(&SynthConfig { n: 7, g: 9, d: 5, h: 3, k_true: 2, ..Default::default() })?;
            let dir = std::env::temp_dir().join(format!("composeae-selftest-{}", std::process::id()));
            std::fs::create_dir_all(&dir)?;
            let path = dir.join("rt.json");
            ds.save(&path)?;
            let back = load_dataset(&path);
            std::fs::remove_dir_all(&dir)?;
            ensure!(back? == ds, "round trip differs");
            Ok("equal".into())
        }),
        ("generator_determinism", || {
            let cfg = SynthConfig { n: 30, g: 30, d: 8, h: 4, k_true: 4, seed: 3, ..Default::default() };
            ensure!(gen_synthetic(&cfg)? == gen_synthetic(&cfg)?, "datasets differ");
            Ok("identical".into())
        }),
        ("planted_oracle_retrieval", || {
            let cfg = SynthConfig { n: 300, g: 300, d: 32, h: 16, k_true: 16, noise_sigma: 0.0, num_text_concepts: 8, seed: 0 };
            let (ds, truth) = gen_synthetic_with_truth(&cfg)?;
            let emb: Vec<f32> = (0..ds.n).flat_map(|i| truth.apply(ds.query(i), truth.concepts[i])).collect();
            let r1 = recall_at_k(&emb, &ds, &[1], true)?.recall_at(1).unwrap_or(0.0);
            ensure!(r1 == 1.0, "R@1 = {r1}");
            Ok(format!("R@1 = {r1}"))
        }),
        ("negative_sampling", || {
            let ds = gen_synthetic(&SynthConfig { n: 10, g: 10, d: 3, h: 2, k_true: 1, ..Default::default() })?;
            let b1 = sample_batch(&ds, 10, 3, &mut ChaCha8Rng::seed_from_u64(4))?;
            let b2 = sample_batch(&ds, 10, 3, &mut ChaCha8Rng::seed_from_u64(4))?;
            ensure!(b1 == b2, "same seed, different batches");
            for (i, negs) in b1.sample_indices.iter().zip(&b1.negative_indices) {
                ensure!(negs.iter().all(|&j| j != ds.target_index[*i]), "negative equals the positive");
            }
            let small = gen_synthetic(&SynthConfig { n: 5, g: 5, d: 3, h: 2, k_true: 1, ..Default::default() })?;
            let groups = small.gallery_groups();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut counts = [0usize; 5];
            for _ in 0..10_000 {
                counts[sample_negatives(&small, &groups, &[0], 1, &mut rng)?[0][0]] += 1;
            }
            let freqs: Vec<f64> = counts[1..].iter().map(|&c| c as f64 / 10_000.0).collect();
            ensure!(counts[0] == 0 && freqs.iter().all(|f| (f - 0.25).abs() <= 0.02), "{counts:?}");
            Ok(format!("frequencies {freqs:?}"))
        }),
        ("similarity_and_ranking", || {
            ensure!(similarity(&[1.0, 2.0], &[3.0, -1.0])? == 1.0, "dot product");
            ensure!(similarity(&[1.0, 0.0], &[0.0, 1.0])? == 0.0, "orthogonal");
            let order = rank_gallery(&[1.0, 0.0], &[0.5, 0.0, 2.0, 1.0, 2.0, 1.0])?;
            ensure!(order == [1, 2, 0], "{order:?}");
            Ok(format!("{order:?}"))
        }),
        ("recall_full_cutoff", || {
            let ds = gen_synthetic(&SynthConfig { n: 8, g: 8, d: 3, h: 2, k_true: 1, ..Default::default() })?;
            let r = recall_at_k(&[0.1; 24], &ds, &[8, 100], false)?;
            ensure!(r.recall_at(8) == Some(1.0) && r.recall_at(100) == Some(1.0) && !r.warnings.is_empty(), "{r:?}");
            Ok("recall 1.0, clamped with a warning".into())
        }),
        ("cli_parsing", || {
            ensure!(parse_command(["train", "--config", "c.json", "--set", "weights.lambda_sym=0"]).is_ok(), "valid command");
            let verbs = parse_command(["fly"]).err().map(|e| e.to_string()).unwrap_or_default();
            ensure!(verbs.contains("gradcheck") && verbs.contains("selftest"), "{verbs}");
            let key = parse_command(["train", "--set", "nope=1", "--config", "c.json"]).err().map(|e| e.to_string());
            ensure!(key.as_deref() == Some("unknown config key: nope"), "{key:?}");
            Ok("usage and key errors".into())
        }),
    ]
}

pub fn run_all() -> Vec<CheckResult> {
    checks()
        .into_iter()
        .map(|(name, check)| match check() {
            Ok(detail) => CheckResult { name, passed: true, detail },
            Err(e) => CheckResult { name, passed: false, detail: e.to_string() },
        })
        .collect()
}
