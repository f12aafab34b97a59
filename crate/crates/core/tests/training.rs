mod common;

use std::fs;

use common::tiny_config;
use composeae::composition::HiddenSizes;
use composeae::data::gen_synthetic;
use composeae::training::train;
use composeae::{
    BaseLoss, Checkpoint, Error, FeatureDataset, LossWeights, ModelConfig, SynthConfig, TrainConfig, Trainer,
    Variant,
};

fn small_model(variant: Variant) -> ModelConfig {
    ModelConfig {
        d: 16,
        h: 8,
        k: 8,
        hidden: HiddenSizes { gamma: 16, eta: 16, rho: 16, decoder: 16, rho_conv_fc: 16, baseline: 16 },
        conv_filters: 4,
        conv_len: 4,
        conv_kernel: 3,
        variant,
    }
}

fn small_data(seed: u64) -> FeatureDataset {
    gen_synthetic(&SynthConfig { n: 64, g: 80, d: 16, h: 8, k_true: 8, num_text_concepts: 4, seed, ..Default::default() })
        .unwrap()
}

fn config(variant: Variant, seed: u64) -> TrainConfig {
    TrainConfig {
        model: small_model(variant),
        batch_size: 16,
        epochs: 4,
        seed,
        repeats: 1,
        ks: vec![1, 10],
        ..Default::default()
    }
}

fn bits(c: &Checkpoint) -> Vec<u32> {
    c.model.params.leaves().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let ds = small_data(0);
    for base in [BaseLoss::Smax, BaseLoss::St] {
        let mut cfg = config(Variant::Composeae, 5);
        cfg.weights.base = Some(base);
        let (a, ha) = train(&cfg, &ds, Some(&ds)).unwrap();
        let (b, hb) = train(&cfg, &ds, Some(&ds)).unwrap();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(ha, hb);
        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path().join("a.ckpt")).unwrap();
        b.save(dir.path().join("b.ckpt")).unwrap();
        assert_eq!(fs::read(dir.path().join("a.ckpt")).unwrap(), fs::read(dir.path().join("b.ckpt")).unwrap());
    }
}

#[test]
fn different_seeds_differ() {
    let ds = small_data(0);
    let (a, _) = train(&config(Variant::Composeae, 1), &ds, None).unwrap();
    let (b, _) = train(&config(Variant::Composeae, 2), &ds, None).unwrap();
    assert_ne!(bits(&a), bits(&b));
}

#[test]
fn small_step_decreases_the_objective() {
    let mut decreased = 0;
    for seed in 0..20 {
        let ds = small_data(100 + seed);
        let mut cfg = config(Variant::Composeae, seed);
        cfg.learning_rate = 1e-4;
        let mut trainer = Trainer::new(cfg, &ds, None).unwrap();
        let batch = trainer.make_batch((0..16).collect()).unwrap();
        let before = trainer.loss_on(&batch).unwrap().total;
        let stepped = trainer.step_on(&batch).unwrap().total;
        assert_eq!(before, stepped);
        let after = trainer.loss_on(&batch).unwrap().total;
        if after < before {
            decreased += 1;
        }
    }
    assert!(decreased >= 19, "only {decreased}/20 seeds decreased");
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let ds = small_data(3);
    for base in [BaseLoss::Smax, BaseLoss::St] {
        let mut cfg = config(Variant::Composeae, 9);
        cfg.epochs = 10;
        cfg.weights.base = Some(base);
        let (full, full_hist) = train(&cfg, &ds, Some(&ds)).unwrap();

        let mut first = Trainer::new(cfg.clone(), &ds, Some(&ds)).unwrap();
        for _ in 0..5 {
            first.run_epoch().unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        first.checkpoint().save(&path).unwrap();
        let mut records = first.history().records.clone();
        drop(first);

        let mut second = Trainer::from_checkpoint(Checkpoint::load(&path).unwrap(), &ds, Some(&ds)).unwrap();
        second.run().unwrap();
        let (resumed, hist) = second.finish();
        records.extend(hist.records);
        assert_eq!(bits(&resumed), bits(&full));
        assert_eq!(resumed, full);
        assert_eq!(records, full_hist.records);
    }
}

#[test]
fn checkpoint_round_trip() {
    let ds = small_data(4);
    for variant in Variant::ALL {
        let mut cfg = config(variant, 2);
        cfg.epochs = 1;
        let (ckpt, _) = train(&cfg, &ds, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        ckpt.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);
    }
    let fresh = Trainer::new(config(Variant::Composeae, 0), &ds, None).unwrap().checkpoint();
    let dir = tempfile::tempdir().unwrap();
    fresh.save(dir.path().join("f.ckpt")).unwrap();
    assert_eq!(Checkpoint::load(dir.path().join("f.ckpt")).unwrap(), fresh);
}

fn rewrite_header(path: &std::path::Path, edit: impl FnOnce(&mut serde_json::Value)) {
    let bytes = fs::read(path).unwrap();
    let split = bytes.iter().position(|&b| b == b'\n').unwrap();
    let mut header: serde_json::Value = serde_json::from_slice(&bytes[..split]).unwrap();
    edit(&mut header);
    let mut out = serde_json::to_vec(&header).unwrap();
    out.extend_from_slice(&bytes[split..]);
    fs::write(path, out).unwrap();
}

#[test]
fn foreign_version_is_unsupported() {
    let ds = small_data(4);
    let ckpt = Trainer::new(config(Variant::Composeae, 0), &ds, None).unwrap().checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.ckpt");
    ckpt.save(&path).unwrap();
    rewrite_header(&path, |h| h["version"] = "CRX9".into());
    assert!(matches!(Checkpoint::load(&path), Err(Error::UnsupportedVersion(_))));
}

#[test]
fn shape_mismatch_is_a_format_error() {
    let ds = small_data(4);
    let ckpt = Trainer::new(config(Variant::Composeae, 0), &ds, None).unwrap().checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.ckpt");
    ckpt.save(&path).unwrap();
    rewrite_header(&path, |h| h["config"]["model"]["hidden"]["gamma"] = 17.into());
    let err = Checkpoint::load(&path).unwrap_err();
    assert!(matches!(err, Error::Format(_)), "{err}");
}

#[test]
fn decoders_get_no_gradient_without_reconstruction_weights() {
    let ds = small_data(5);
    let mut cfg = config(Variant::Composeae, 0);
    cfg.weights = LossWeights { lambda_sym: 0.0, lambda_ri: 0.0, lambda_rt: 0.0, ..Default::default() };
    let mut trainer = Trainer::new(cfg, &ds, None).unwrap();
    let batch = trainer.make_batch((0..16).collect()).unwrap();
    for (name, g) in trainer.gradients_on(&batch).unwrap() {
        let nonzero = g.data().iter().any(|v| *v != 0.0);
        if name.starts_with("dec_") {
            assert!(!nonzero, "{name} received a gradient");
        } else if name.ends_with("weight") || name == "a" || name == "b" {
            assert!(nonzero, "{name} received no gradient");
        }
    }
}

#[test]
fn reconstruction_weights_reach_the_decoders() {
    let ds = small_data(5);
    let mut trainer = Trainer::new(config(Variant::Composeae, 0), &ds, None).unwrap();
    let batch = trainer.make_batch((0..16).collect()).unwrap();
    let grads = trainer.gradients_on(&batch).unwrap();
    assert!(grads
        .iter()
        .filter(|(n, _)| n.starts_with("dec_") && n.ends_with("weight"))
        .all(|(_, g)| g.data().iter().any(|v| *v != 0.0)));
}

#[test]
fn concat_ignores_auxiliary_weights() {
    let ds = small_data(6);
    let with = config(Variant::Concat, 3);
    let mut without = with.clone();
    without.weights.lambda_sym = 0.0;
    without.weights.lambda_ri = 0.0;
    without.weights.lambda_rt = 0.0;
    let (a, ha) = train(&with, &ds, None).unwrap();
    let (b, hb) = train(&without, &ds, None).unwrap();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(ha.records, hb.records);
}

#[test]
fn total_is_the_weighted_sum_at_every_epoch() {
    let ds = small_data(7);
    for variant in Variant::ALL {
        for base in [BaseLoss::Smax, BaseLoss::St] {
            let mut cfg = config(variant, 1);
            cfg.weights.base = Some(base);
            cfg.weights.lambda_sym = 0.3;
            cfg.weights.lambda_ri = 0.05;
            let (_, hist) = train(&cfg, &ds, None).unwrap();
            let w = &cfg.weights;
            for r in &hist.records {
                let sum = r.l_base
                    + w.lambda_sym as f64 * r.l_sym
                    + w.lambda_ri as f64 * r.l_ri
                    + w.lambda_rt as f64 * r.l_rt;
                assert!((r.l_t - sum).abs() <= 1e-5, "{variant} {base:?}: {r:?}");
            }
        }
    }
}

#[test]
fn base_loss_follows_dataset_hint_unless_configured() {
    let mut ds = small_data(8);
    ds.base_loss = Some(BaseLoss::St);
    let cfg = config(Variant::Composeae, 0);
    assert_eq!(Trainer::new(cfg.clone(), &ds, None).unwrap().base_loss(), BaseLoss::St);
    let mut forced = cfg.clone();
    forced.weights.base = Some(BaseLoss::Smax);
    assert_eq!(Trainer::new(forced, &ds, None).unwrap().base_loss(), BaseLoss::Smax);
    ds.base_loss = None;
    assert_eq!(Trainer::new(cfg, &ds, None).unwrap().base_loss(), BaseLoss::Smax);
}

#[test]
fn invalid_configs_are_rejected() {
    let ds = small_data(0);
    let mut cfg = config(Variant::Composeae, 0);
    cfg.momentum = 1.0;
    assert!(matches!(Trainer::new(cfg, &ds, None), Err(Error::Config(_))));
    let mut cfg = config(Variant::Composeae, 0);
    cfg.batch_size = 1000;
    assert!(matches!(Trainer::new(cfg, &ds, None), Err(Error::Config(_))));
    let mut cfg = config(Variant::Composeae, 0);
    cfg.model = tiny_config(Variant::Composeae);
    assert!(matches!(Trainer::new(cfg, &ds, None), Err(Error::Config(_))));
}
