//! Straight-line f64 re-implementations of the forward passes and a naive
//! ranking, used as independent references.

#![allow(clippy::needless_range_loop)]

use std::collections::HashMap;

use composeae::{Model, ModelConfig, Variant};

use super::{rng, tiny_config, uniform_vec};

pub struct Params(HashMap<String, Vec<f64>>);

impl Params {
    pub fn of(model: &Model) -> Self {
        Params(
            model
                .params
                .named()
                .into_iter()
                .map(|(n, t)| (n, t.data().iter().map(|&v| v as f64).collect()))
                .collect(),
        )
    }

    pub fn get(&self, name: &str) -> &[f64] {
        &self.0[name]
    }

    pub fn linear(&self, prefix: &str, x: &[f64]) -> Vec<f64> {
        let w = self.get(&format!("{prefix}.weight"));
        let b = self.get(&format!("{prefix}.bias"));
        let out = b.len();
        assert_eq!(w.len(), x.len() * out);
        let mut y = b.to_vec();
        for (i, xi) in x.iter().enumerate() {
            for o in 0..out {
                y[o] += xi * w[i * out + o];
            }
        }
        y
    }

    pub fn mlp(&self, prefix: &str, x: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = self.linear(&format!("{prefix}.hidden"), x).into_iter().map(|v| v.max(0.0)).collect();
        self.linear(&format!("{prefix}.output"), &h)
    }
}

fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

pub fn rho_conv(p: &Params, cfg: &ModelConfig, phi: &[f64], x: &[f64], q: &[f64]) -> Vec<f64> {
    let joined: Vec<f64> = phi.iter().chain(x).chain(q).copied().collect();
    let h1 = relu(p.linear("rho_conv.fc1", &joined));
    let h2 = relu(p.linear("rho_conv.fc2", &h1));
    let (f, len, kernel) = (cfg.conv_filters, cfg.conv_len, cfg.conv_kernel);
    let pad = kernel / 2;
    let w = p.get("rho_conv.conv_weight");
    let b = p.get("rho_conv.conv_bias");
    let mut conv = vec![vec![0.0; len]; f];
    for o in 0..f {
        for t in 0..len {
            let mut acc = b[o];
            for c in 0..f {
                for k in 0..kernel {
                    let pos = t as isize + k as isize - pad as isize;
                    if pos >= 0 && (pos as usize) < len {
                        acc += w[(o * f + c) * kernel + k] * h2[c * len + pos as usize];
                    }
                }
            }
            conv[o][t] = acc;
        }
    }
    let bins = cfg.d / f;
    let mut out = Vec::with_capacity(cfg.d);
    for row in &conv {
        for i in 0..bins {
            let start = i * len / bins;
            let end = ((i + 1) * len).div_ceil(bins);
            out.push(row[start..end].iter().copied().fold(f64::NEG_INFINITY, f64::max));
        }
    }
    out
}

/// Composition with angles multiplied by `sign` (+1 forward, -1 conjugate).
pub fn rotation_oracle(p: &Params, cfg: &ModelConfig, x: &[f64], q: &[f64], sign: f64) -> Vec<f64> {
    let theta = p.mlp("gamma", q);
    let lifted = p.mlp("eta", x);
    let mut phi = Vec::with_capacity(2 * cfg.k);
    for i in 0..cfg.k {
        let (c, s) = ((sign * theta[i]).cos(), (sign * theta[i]).sin());
        let (re, im) = (lifted[2 * i], lifted[2 * i + 1]);
        phi.push(c * re - s * im);
        phi.push(s * re + c * im);
    }
    let mut out = vec![0.0; cfg.d];
    if cfg.variant.uses_rho() {
        let a = p.get("a")[0];
        for (o, r) in out.iter_mut().zip(p.mlp("rho", &phi)) {
            *o += a * r;
        }
    }
    if cfg.variant.uses_rho_conv() {
        let b = p.get("b")[0];
        for (o, r) in out.iter_mut().zip(rho_conv(p, cfg, &phi, x, q)) {
            *o += b * r;
        }
    }
    out
}

pub fn tirg_oracle(p: &Params, z: &[f64], q: &[f64]) -> Vec<f64> {
    let joined: Vec<f64> = z.iter().chain(q).copied().collect();
    let gate = p.mlp("tirg.gate", &joined);
    let res = p.mlp("tirg.residual", &joined);
    let (wg, wr) = (p.get("tirg.w_gate")[0], p.get("tirg.w_res")[0]);
    (0..z.len())
        .map(|i| wg * z[i] / (1.0 + (-gate[i]).exp()) + wr * res[i])
        .collect()
}

pub fn concat_oracle(p: &Params, z: &[f64], q: &[f64]) -> Vec<f64> {
    let joined: Vec<f64> = z.iter().chain(q).copied().collect();
    p.mlp("concat", &joined)
}

/// Model with every parameter redrawn (biases and scalars included) so no
/// term of the graph is trivially zero.
pub fn random_model(variant: Variant, seed: u64) -> Model {
    let cfg = tiny_config(variant);
    let mut model = Model::new(cfg, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    model.params.visit_mut(&mut |name, t| {
        let keep_zero = (name == "a" && !variant.uses_rho()) || (name == "b" && !variant.uses_rho_conv());
        if !keep_zero {
            let fresh = uniform_vec(&mut r, t.len(), -0.8, 0.8);
            t.data_mut().copy_from_slice(&fresh);
        }
    });
    model
}

pub fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Repeatedly picks the best remaining entry by a plain scan.
pub fn naive_rank(query: &[f32], gallery: &[f32]) -> Vec<usize> {
    let d = query.len();
    let scores: Vec<f32> = gallery
        .chunks(d)
        .map(|row| {
            let mut s = 0.0f32;
            for i in 0..d {
                s += query[i] * row[i];
            }
            s
        })
        .collect();
    let mut remaining: Vec<usize> = (0..scores.len()).collect();
    let mut out = Vec::new();
    while !remaining.is_empty() {
        let mut best = 0;
        for pos in 1..remaining.len() {
            let (c, b) = (remaining[pos], remaining[best]);
            if scores[c] > scores[b] || (scores[c] == scores[b] && c < b) {
                best = pos;
            }
        }
        out.push(remaining.remove(best));
    }
    out
}

