mod common;

use common::{normal_vec, rng, tiny_config, uniform_vec};
use composeae::composition::{rotate, ComplexVec, Composer};
use composeae::{Model, Tape, Tensor, Variant};
use proptest::prelude::*;

const DRAWS: u64 = 10_000;
const TOL: f32 = 1e-5;

#[test]
fn text_rotations_have_unit_modulus() {
    let mut model = Model::new(tiny_config(Variant::Composeae), 4).unwrap();
    // Large weights push angles well past 2π.
    if let Composer::Rotation(p) = &mut model.params.composer {
        p.gamma.output.weight.data_mut().iter_mut().for_each(|w| *w *= 40.0);
    }
    let mut r = rng(1);
    let mut worst = 0.0f32;
    for _ in 0..DRAWS {
        let q = normal_vec(&mut r, 3);
        let (theta, delta) = model.text_to_rotation(&q).unwrap();
        assert_eq!(theta.len(), 2);
        for i in 0..delta.len() {
            worst = worst.max((delta.modulus(i) - 1.0).abs());
        }
    }
    assert!(worst <= TOL, "{worst:e}");
}

fn random_unit(r: &mut rand_chacha::ChaCha8Rng, k: usize) -> ComplexVec {
    ComplexVec::from_angles(&uniform_vec(r, k, -10.0, 10.0))
}

#[test]
fn rotation_is_an_isometry_and_conjugate_inverts_it() {
    let mut r = rng(2);
    let k = 8;
    let (mut iso, mut inv) = (0.0f32, 0.0f32);
    for _ in 0..DRAWS {
        let delta = random_unit(&mut r, k);
        let v = ComplexVec::from_interleaved(normal_vec(&mut r, 2 * k)).unwrap();
        let out = rotate(&delta, &v).unwrap();
        let back = rotate(&delta.conj(), &out).unwrap();
        for i in 0..k {
            iso = iso.max((out.modulus(i) - v.modulus(i)).abs());
            let (a, b) = (back.get(i), v.get(i));
            inv = inv.max((a.0 - b.0).abs()).max((a.1 - b.1).abs());
        }
    }
    assert!(iso <= TOL, "isometry {iso:e}");
    assert!(inv <= TOL, "conjugate inverse {inv:e}");
}

#[test]
fn rotate_rejects_length_mismatch() {
    let a = ComplexVec::from_angles(&[0.0, 1.0]);
    let b = ComplexVec::from_angles(&[0.0]);
    assert!(rotate(&a, &b).is_err());
}

fn zero_gamma(model: &mut Model) {
    if let Composer::Rotation(p) = &mut model.params.composer {
        for t in [&mut p.gamma.output.weight, &mut p.gamma.output.bias] {
            t.data_mut().iter_mut().for_each(|w| *w = 0.0);
        }
    }
}

#[test]
fn zero_angles_make_the_rho_branch_text_invariant() {
    let mut model = Model::new(tiny_config(Variant::Composeae), 9).unwrap();
    zero_gamma(&mut model);
    let cfg = model.config.clone();
    let mut r = rng(5);
    for _ in 0..50 {
        let z = normal_vec(&mut r, 4);
        let rho_out: Vec<Vec<f32>> = (0..2)
            .map(|_| {
                let q = normal_vec(&mut r, 3);
                let mut tape = Tape::<f32>::new();
                let bound = model.params.bind(&mut tape, false);
                let Composer::Rotation(p) = &bound.composer else { unreachable!() };
                let zv = tape.constant(Tensor::matrix(1, 4, z.clone()).unwrap());
                let qv = tape.constant(Tensor::matrix(1, 3, q).unwrap());
                let (_, delta) = p.rotation(&mut tape, qv).unwrap();
                let branches = p.branches(&mut tape, &cfg, delta, zv, qv).unwrap();
                tape.value(branches.rho.unwrap()).data().to_vec()
            })
            .collect();
        assert_eq!(rho_out[0], rho_out[1]);
    }
}

#[test]
fn zero_angles_make_conjugate_equal_compose() {
    let mut model = Model::new(tiny_config(Variant::Composeae), 10).unwrap();
    zero_gamma(&mut model);
    let mut r = rng(6);
    for _ in 0..50 {
        let y = normal_vec(&mut r, 4);
        let q = normal_vec(&mut r, 3);
        assert_eq!(model.compose(&y, &q).unwrap(), model.compose_conjugate(&y, &q).unwrap());
    }
}

proptest! {
    #[test]
    fn compose_is_deterministic_and_has_length_d(seed in 0u64..500, vi in 0usize..7) {
        let variant = Variant::ALL[vi];
        let a = Model::new(tiny_config(variant), seed).unwrap();
        let b = Model::new(tiny_config(variant), seed).unwrap();
        let mut r = rng(seed);
        let (z, q) = (normal_vec(&mut r, 4), normal_vec(&mut r, 3));
        let out = a.compose(&z, &q).unwrap();
        prop_assert_eq!(out.len(), 4);
        prop_assert!(out.iter().all(|v| v.is_finite()));
        prop_assert_eq!(out, b.compose(&z, &q).unwrap());
    }
}

#[test]
fn non_finite_inputs_are_numeric_errors() {
    let model = Model::new(tiny_config(Variant::Composeae), 0).unwrap();
    let err = model.compose(&[0.0, f32::NAN, 0.0, 0.0], &[0.0; 3]).unwrap_err();
    assert!(matches!(err, composeae::Error::Numeric(_)), "{err}");
    assert!(model.compose(&[0.0; 3], &[0.0; 3]).is_err());
}
