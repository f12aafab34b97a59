//! Query composition networks.
//!
//! The ComposeAE encoder maps text features to per-coordinate angles,
//! lifts image features into `C^k`, rotates them elementwise and maps the
//! result back to the image feature space through two branches:
//!
//! ```text
//! theta = gamma(q)            delta = exp(j * theta)
//! phi   = delta * eta(z)      (elementwise complex product)
//! out   = a * rho(phi) + b * rho_conv(phi, z, q)
//! ```
//!
//! The conjugate path swaps `delta` for `exp(-j * theta)` and `z` for a
//! target feature vector. Decoders map `out` back to both input spaces.
//! Two baselines share the same interface: a gated residual composer and a
//! plain MLP over the concatenated features.
//!
//! Parameters are stored in trees generic over the leaf type, so the same
//! layout serves storage (`Tensor<f32>`), tape bindings (`Var`), gradients
//! and optimizer buffers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Composeae,
    ComposeaeNoSym,
    ComposeaeConcat,
    ComposeaeNoRhoconv,
    ComposeaeNoRho,
    Tirg,
    Concat,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Composeae,
        Variant::ComposeaeNoSym,
        Variant::ComposeaeConcat,
        Variant::ComposeaeNoRhoconv,
        Variant::ComposeaeNoRho,
        Variant::Tirg,
        Variant::Concat,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Composeae => "composeae",
            Variant::ComposeaeNoSym => "composeae_no_sym",
            Variant::ComposeaeConcat => "composeae_concat",
            Variant::ComposeaeNoRhoconv => "composeae_no_rhoconv",
            Variant::ComposeaeNoRho => "composeae_no_rho",
            Variant::Tirg => "tirg",
            Variant::Concat => "concat",
        }
    }

    /// Uses the complex rotation block (and therefore has a conjugate path).
    pub fn has_rotation(self) -> bool {
        matches!(
            self,
            Variant::Composeae
                | Variant::ComposeaeNoSym
                | Variant::ComposeaeNoRhoconv
                | Variant::ComposeaeNoRho
        )
    }

    pub fn uses_rho(self) -> bool {
        self.has_rotation() && self != Variant::ComposeaeNoRho
    }

    pub fn uses_rho_conv(self) -> bool {
        self.has_rotation() && self != Variant::ComposeaeNoRhoconv
    }

    /// Whether the rotational symmetry term can contribute to the objective.
    pub fn uses_symmetry(self) -> bool {
        self.has_rotation() && self != Variant::ComposeaeNoSym
    }

    /// Whether the decoders and reconstruction terms take part in training.
    /// The two plain baselines train on the base loss alone.
    pub fn uses_reconstruction(self) -> bool {
        !matches!(self, Variant::Tirg | Variant::Concat)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HiddenSizes {
    pub gamma: usize,
    pub eta: usize,
    pub rho: usize,
    pub decoder: usize,
    /// Width of the first fully connected layer in `rho_conv`.
    pub rho_conv_fc: usize,
    /// Hidden width of the baseline MLPs.
    pub baseline: usize,
}

impl Default for HiddenSizes {
    fn default() -> Self {
        Self { gamma: 512, eta: 512, rho: 512, decoder: 512, rho_conv_fc: 1024, baseline: 512 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Image feature dimension.
    pub d: usize,
    /// Text feature dimension.
    pub h: usize,
    /// Complex space dimension.
    pub k: usize,
    pub hidden: HiddenSizes,
    /// Convolution filters in `rho_conv`; `d` must be a multiple.
    pub conv_filters: usize,
    /// Sequence length the second `rho_conv` layer is reshaped to.
    pub conv_len: usize,
    /// Odd kernel size; padding keeps the length.
    pub conv_kernel: usize,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 512,
            h: 768,
            k: 512,
            hidden: HiddenSizes::default(),
            conv_filters: 64,
            conv_len: 16,
            conv_kernel: 3,
            variant: Variant::Composeae,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let hs = &self.hidden;
        let sizes = [
            ("d", self.d),
            ("h", self.h),
            ("k", self.k),
            ("hidden.gamma", hs.gamma),
            ("hidden.eta", hs.eta),
            ("hidden.rho", hs.rho),
            ("hidden.decoder", hs.decoder),
            ("hidden.rho_conv_fc", hs.rho_conv_fc),
            ("hidden.baseline", hs.baseline),
            ("conv_filters", self.conv_filters),
            ("conv_len", self.conv_len),
            ("conv_kernel", self.conv_kernel),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if !self.d.is_multiple_of(self.conv_filters) {
            return Err(Error::Config(format!(
                "model.d = {} must be divisible by model.conv_filters = {}",
                self.d, self.conv_filters
            )));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "model.conv_kernel must be odd, got {}",
                self.conv_kernel
            )));
        }
        Ok(())
    }

    fn pool_len(&self) -> usize {
        self.d / self.conv_filters
    }
}

/// `x W + b` with `W` stored as `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<P> {
    pub weight: P,
    pub bias: P,
}

/// Two affine layers with a ReLU in between.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<P> {
    pub hidden: Linear<P>,
    pub output: Linear<P>,
}

/// Fully connected, fully connected, reshape, conv1d, adaptive max pool.
#[derive(Clone, Debug, PartialEq)]
pub struct RhoConv<P> {
    pub fc1: Linear<P>,
    pub fc2: Linear<P>,
    pub conv_weight: P,
    pub conv_bias: P,
}

/// Learnable parts of the rotation composer.
#[derive(Clone, Debug, PartialEq)]
pub struct ComposeAEParams<P> {
    pub gamma: Mlp<P>,
    pub eta: Mlp<P>,
    pub rho: Mlp<P>,
    pub rho_conv: RhoConv<P>,
    pub a: P,
    pub b: P,
}

/// Gated residual baseline: `w_gate * z * sigmoid(gate([z; q])) + w_res * residual([z; q])`.
#[derive(Clone, Debug, PartialEq)]
pub struct TirgParams<P> {
    pub gate: Mlp<P>,
    pub residual: Mlp<P>,
    pub w_gate: P,
    pub w_res: P,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Composer<P> {
    Rotation(ComposeAEParams<P>),
    Tirg(TirgParams<P>),
    Concat(Mlp<P>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<P> {
    pub composer: Composer<P>,
    pub dec_img: Mlp<P>,
    pub dec_txt: Mlp<P>,
}

type MapFn<'a, P, Q> = dyn FnMut(&str, &P) -> Q + 'a;
type VisitFn<'a, P> = dyn FnMut(&str, &mut P) + 'a;

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<P> Linear<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut MapFn<'_, P, Q>) -> Linear<Q> {
        Linear {
            weight: f(&join(prefix, "weight"), &self.weight),
            bias: f(&join(prefix, "bias"), &self.bias),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut VisitFn<'_, P>) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

impl<P> Mlp<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut MapFn<'_, P, Q>) -> Mlp<Q> {
        Mlp {
            hidden: self.hidden.map(&join(prefix, "hidden"), f),
            output: self.output.map(&join(prefix, "output"), f),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut VisitFn<'_, P>) {
        self.hidden.visit_mut(&join(prefix, "hidden"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

impl<P> RhoConv<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut MapFn<'_, P, Q>) -> RhoConv<Q> {
        RhoConv {
            fc1: self.fc1.map(&join(prefix, "fc1"), f),
            fc2: self.fc2.map(&join(prefix, "fc2"), f),
            conv_weight: f(&join(prefix, "conv_weight"), &self.conv_weight),
            conv_bias: f(&join(prefix, "conv_bias"), &self.conv_bias),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut VisitFn<'_, P>) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
        f(&join(prefix, "conv_weight"), &mut self.conv_weight);
        f(&join(prefix, "conv_bias"), &mut self.conv_bias);
    }
}

impl<P> ComposeAEParams<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut MapFn<'_, P, Q>) -> ComposeAEParams<Q> {
        ComposeAEParams {
            gamma: self.gamma.map(&join(prefix, "gamma"), f),
            eta: self.eta.map(&join(prefix, "eta"), f),
            rho: self.rho.map(&join(prefix, "rho"), f),
            rho_conv: self.rho_conv.map(&join(prefix, "rho_conv"), f),
            a: f(&join(prefix, "a"), &self.a),
            b: f(&join(prefix, "b"), &self.b),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut VisitFn<'_, P>) {
        self.gamma.visit_mut(&join(prefix, "gamma"), f);
        self.eta.visit_mut(&join(prefix, "eta"), f);
        self.rho.visit_mut(&join(prefix, "rho"), f);
        self.rho_conv.visit_mut(&join(prefix, "rho_conv"), f);
        f(&join(prefix, "a"), &mut self.a);
        f(&join(prefix, "b"), &mut self.b);
    }
}

impl<P> TirgParams<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut MapFn<'_, P, Q>) -> TirgParams<Q> {
        TirgParams {
            gate: self.gate.map(&join(prefix, "gate"), f),
            residual: self.residual.map(&join(prefix, "residual"), f),
            w_gate: f(&join(prefix, "w_gate"), &self.w_gate),
            w_res: f(&join(prefix, "w_res"), &self.w_res),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut VisitFn<'_, P>) {
        self.gate.visit_mut(&join(prefix, "gate"), f);
        self.residual.visit_mut(&join(prefix, "residual"), f);
        f(&join(prefix, "w_gate"), &mut self.w_gate);
        f(&join(prefix, "w_res"), &mut self.w_res);
    }
}

impl<P> ModelParams<P> {
    /// Maps every leaf, passing its dotted name (e.g. `gamma.hidden.weight`).
    /// Leaves are visited in a fixed order shared with [`visit_mut`](Self::visit_mut).
    pub fn map<Q>(&self, f: &mut MapFn<'_, P, Q>) -> ModelParams<Q> {
        let composer = match &self.composer {
            Composer::Rotation(p) => Composer::Rotation(p.map("", f)),
            Composer::Tirg(p) => Composer::Tirg(p.map("tirg", f)),
            Composer::Concat(p) => Composer::Concat(p.map("concat", f)),
        };
        ModelParams {
            composer,
            dec_img: self.dec_img.map("dec_img", f),
            dec_txt: self.dec_txt.map("dec_txt", f),
        }
    }

    pub fn visit_mut(&mut self, f: &mut VisitFn<'_, P>) {
        match &mut self.composer {
            Composer::Rotation(p) => p.visit_mut("", f),
            Composer::Tirg(p) => p.visit_mut("tirg", f),
            Composer::Concat(p) => p.visit_mut("concat", f),
        }
        self.dec_img.visit_mut("dec_img", f);
        self.dec_txt.visit_mut("dec_txt", f);
    }

    /// Leaves in visiting order, with their names.
    pub fn named(&self) -> Vec<(String, &P)> {
        let mut names = Vec::new();
        self.map(&mut |name, _| names.push(name.to_string()));
        names.into_iter().zip(self.leaves()).collect()
    }

    /// Leaves in visiting order.
    pub fn leaves(&self) -> Vec<&P> {
        let mut out = Vec::new();
        match &self.composer {
            Composer::Rotation(p) => {
                for m in [&p.gamma, &p.eta, &p.rho] {
                    out.extend(mlp_refs(m));
                }
                let rc = &p.rho_conv;
                out.extend([&rc.fc1.weight, &rc.fc1.bias, &rc.fc2.weight, &rc.fc2.bias]);
                out.extend([&rc.conv_weight, &rc.conv_bias, &p.a, &p.b]);
            }
            Composer::Tirg(p) => {
                out.extend(mlp_refs(&p.gate));
                out.extend(mlp_refs(&p.residual));
                out.extend([&p.w_gate, &p.w_res]);
            }
            Composer::Concat(p) => out.extend(mlp_refs(p)),
        }
        out.extend(mlp_refs(&self.dec_img));
        out.extend(mlp_refs(&self.dec_txt));
        out
    }

    /// Mutable leaves in visiting order.
    pub fn leaves_mut(&mut self) -> Vec<&mut P> {
        let mut out = Vec::new();
        match &mut self.composer {
            Composer::Rotation(p) => {
                for m in [&mut p.gamma, &mut p.eta, &mut p.rho] {
                    out.extend(mlp_refs_mut(m));
                }
                let rc = &mut p.rho_conv;
                out.extend([&mut rc.fc1.weight, &mut rc.fc1.bias, &mut rc.fc2.weight, &mut rc.fc2.bias]);
                out.extend([&mut rc.conv_weight, &mut rc.conv_bias, &mut p.a, &mut p.b]);
            }
            Composer::Tirg(p) => {
                out.extend(mlp_refs_mut(&mut p.gate));
                out.extend(mlp_refs_mut(&mut p.residual));
                out.extend([&mut p.w_gate, &mut p.w_res]);
            }
            Composer::Concat(p) => out.extend(mlp_refs_mut(p)),
        }
        out.extend(mlp_refs_mut(&mut self.dec_img));
        out.extend(mlp_refs_mut(&mut self.dec_txt));
        out
    }
}

fn mlp_refs<P>(m: &Mlp<P>) -> [&P; 4] {
    [&m.hidden.weight, &m.hidden.bias, &m.output.weight, &m.output.bias]
}

fn mlp_refs_mut<P>(m: &mut Mlp<P>) -> [&mut P; 4] {
    let Mlp { hidden, output } = m;
    [&mut hidden.weight, &mut hidden.bias, &mut output.weight, &mut output.bias]
}

// ---------------------------------------------------------------------------
// initialization

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    let bound = 1.0 / (fan_in as f32).sqrt();
    let mut t = Tensor::zeros(shape);
    t.data_mut()
        .iter_mut()
        .for_each(|v| *v = rng.random_range(-bound..=bound));
    t
}

impl Linear<Tensor<f32>> {
    pub fn init(rng: &mut ChaCha8Rng, input: usize, output: usize) -> Self {
        Linear { weight: uniform(rng, &[input, output], input), bias: Tensor::zeros(&[output]) }
    }
}

impl Mlp<Tensor<f32>> {
    pub fn init(rng: &mut ChaCha8Rng, input: usize, hidden: usize, output: usize) -> Self {
        Mlp { hidden: Linear::init(rng, input, hidden), output: Linear::init(rng, hidden, output) }
    }
}

impl ModelParams<Tensor<f32>> {
    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero, `a = 1`, `b = 0.1`
    /// (the disabled one is zero in the single-branch ablations), both
    /// baseline mixing scalars 1.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h, k, hs) = (config.d, config.h, config.k, &config.hidden);
        let composer = match config.variant {
            v if v.has_rotation() => {
                let f = config.conv_filters;
                let conv_fan_in = f * config.conv_kernel;
                Composer::Rotation(ComposeAEParams {
                    gamma: Mlp::init(&mut rng, h, hs.gamma, k),
                    eta: Mlp::init(&mut rng, d, hs.eta, 2 * k),
                    rho: Mlp::init(&mut rng, 2 * k, hs.rho, d),
                    rho_conv: RhoConv {
                        fc1: Linear::init(&mut rng, 2 * k + d + h, hs.rho_conv_fc),
                        fc2: Linear::init(&mut rng, hs.rho_conv_fc, f * config.conv_len),
                        conv_weight: uniform(&mut rng, &[f, f, config.conv_kernel], conv_fan_in),
                        conv_bias: Tensor::zeros(&[f]),
                    },
                    a: Tensor::scalar(if v.uses_rho() { 1.0 } else { 0.0 }),
                    b: Tensor::scalar(if v.uses_rho_conv() { 0.1 } else { 0.0 }),
                })
            }
            Variant::Tirg => Composer::Tirg(TirgParams {
                gate: Mlp::init(&mut rng, d + h, hs.baseline, d),
                residual: Mlp::init(&mut rng, d + h, hs.baseline, d),
                w_gate: Tensor::scalar(1.0),
                w_res: Tensor::scalar(1.0),
            }),
            _ => Composer::Concat(Mlp::init(&mut rng, d + h, hs.baseline, d)),
        };
        Ok(ModelParams {
            composer,
            dec_img: Mlp::init(&mut rng, d, hs.decoder, d),
            dec_txt: Mlp::init(&mut rng, d, hs.decoder, h),
        })
    }

    /// Places every leaf on `tape` as a differentiable (or constant) node.
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, trainable: bool) -> ModelParams<Var> {
        self.map(&mut |_, t| tape.leaf(t.cast::<T>().with_grad(trainable)))
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

// ---------------------------------------------------------------------------
// forward graphs

impl Linear<Var> {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        tape.add_bias(y, self.bias)
    }
}

impl Mlp<Var> {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, x)?;
        let h = tape.relu(h);
        self.output.forward(tape, h)
    }
}

/// Outputs of the two mapping branches, before they are summed.
#[derive(Clone, Copy, Debug)]
pub struct Branches {
    pub phi: Var,
    /// `a * rho(phi)` when the branch is enabled.
    pub rho: Option<Var>,
    /// `b * rho_conv(phi, x, q)` when the branch is enabled.
    pub rho_conv: Option<Var>,
    pub composed: Var,
}

impl RhoConv<Var> {
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        config: &ModelConfig,
        phi: Var,
        x: Var,
        q: Var,
    ) -> Result<Var> {
        let rows = tape.value(x).dims2()?.0;
        let joined = tape.concat_cols(&[phi, x, q])?;
        let h = self.fc1.forward(tape, joined)?;
        let h = tape.relu(h);
        let h = self.fc2.forward(tape, h)?;
        let h = tape.relu(h);
        let h = tape.reshape(h, &[rows, config.conv_filters, config.conv_len])?;
        let c = tape.conv1d(h, self.conv_weight, self.conv_bias, config.conv_kernel / 2)?;
        let p = tape.adaptive_max_pool1d(c, config.pool_len())?;
        tape.reshape(p, &[rows, config.d])
    }
}

impl ComposeAEParams<Var> {
    /// Angles `gamma(q)`, `[n, k]`.
    pub fn angles<T: Scalar>(&self, tape: &mut Tape<T>, q: Var) -> Result<Var> {
        self.gamma.forward(tape, q)
    }

    /// Angles and the unit rotation `exp(j * theta)`, `[n, 2k]` interleaved.
    pub fn rotation<T: Scalar>(&self, tape: &mut Tape<T>, q: Var) -> Result<(Var, Var)> {
        let theta = self.angles(tape, q)?;
        Ok((theta, tape.polar(theta)))
    }

    /// Angles and the conjugate rotation `exp(-j * theta)`.
    pub fn conjugate_rotation<T: Scalar>(&self, tape: &mut Tape<T>, q: Var) -> Result<(Var, Var)> {
        let theta = self.angles(tape, q)?;
        let neg = tape.neg(theta);
        Ok((theta, tape.polar(neg)))
    }

    /// Rotates `eta(x)` by `delta` and maps back through the enabled branches.
    pub fn branches<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        config: &ModelConfig,
        delta: Var,
        x: Var,
        q: Var,
    ) -> Result<Branches> {
        let lifted = self.eta.forward(tape, x)?;
        let phi = tape.complex_mul(delta, lifted)?;
        let rho = if config.variant.uses_rho() {
            let r = self.rho.forward(tape, phi)?;
            Some(tape.scale(r, self.a)?)
        } else {
            None
        };
        let rho_conv = if config.variant.uses_rho_conv() {
            let r = self.rho_conv.forward(tape, config, phi, x, q)?;
            Some(tape.scale(r, self.b)?)
        } else {
            None
        };
        let composed = match (rho, rho_conv) {
            (Some(r), Some(c)) => tape.add(r, c)?,
            (Some(r), None) => r,
            (None, Some(c)) => c,
            (None, None) => {
                return Err(Error::Config(format!(
                    "variant {} disables both mapping branches",
                    config.variant
                )))
            }
        };
        Ok(Branches { phi, rho, rho_conv, composed })
    }
}

impl TirgParams<Var> {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, z: Var, q: Var) -> Result<Var> {
        let joined = tape.concat_cols(&[z, q])?;
        let gate = self.gate.forward(tape, joined)?;
        let gate = tape.sigmoid(gate);
        let gated = tape.mul(z, gate)?;
        let gated = tape.scale(gated, self.w_gate)?;
        let res = self.residual.forward(tape, joined)?;
        let res = tape.scale(res, self.w_res)?;
        tape.add(gated, res)
    }
}

impl ModelParams<Var> {
    /// Composed query embeddings `[n, d]` for image features `z` `[n, d]`
    /// and text features `q` `[n, h]`.
    pub fn compose<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        config: &ModelConfig,
        z: Var,
        q: Var,
    ) -> Result<Var> {
        match &self.composer {
            Composer::Rotation(p) => {
                let (_, delta) = p.rotation(tape, q)?;
                Ok(p.branches(tape, config, delta, z, q)?.composed)
            }
            Composer::Tirg(p) => p.forward(tape, z, q),
            Composer::Concat(p) => {
                let joined = tape.concat_cols(&[z, q])?;
                p.forward(tape, joined)
            }
        }
    }

    /// Conjugate-path composition of target features `y` with `q`; `None`
    /// for composers without a rotation.
    pub fn compose_conjugate<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        config: &ModelConfig,
        y: Var,
        q: Var,
    ) -> Result<Option<Var>> {
        match &self.composer {
            Composer::Rotation(p) => {
                let (_, delta) = p.conjugate_rotation(tape, q)?;
                Ok(Some(p.branches(tape, config, delta, y, q)?.composed))
            }
            _ => Ok(None),
        }
    }

    /// Image and text reconstructions of a composed embedding.
    pub fn decode<T: Scalar>(&self, tape: &mut Tape<T>, composed: Var) -> Result<(Var, Var)> {
        let z_hat = self.dec_img.forward(tape, composed)?;
        let q_hat = self.dec_txt.forward(tape, composed)?;
        Ok((z_hat, q_hat))
    }
}

// ---------------------------------------------------------------------------
// complex vectors

/// Complex vector stored as interleaved `(re, im)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexVec {
    interleaved: Vec<f32>,
}

impl ComplexVec {
    pub fn from_interleaved(interleaved: Vec<f32>) -> Result<Self> {
        contract!(
            interleaved.len().is_multiple_of(2),
            "interleaved complex data has odd length {}",
            interleaved.len()
        );
        if interleaved.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("complex vector has non-finite entries".into()));
        }
        Ok(Self { interleaved })
    }

    pub fn from_pairs(pairs: &[(f32, f32)]) -> Result<Self> {
        Self::from_interleaved(pairs.iter().flat_map(|&(r, i)| [r, i]).collect())
    }

    /// `exp(j * theta_i)` per coordinate.
    pub fn from_angles(theta: &[f32]) -> Self {
        Self { interleaved: theta.iter().flat_map(|t| [t.cos(), t.sin()]).collect() }
    }

    pub fn len(&self) -> usize {
        self.interleaved.len() / 2
    }

    pub fn is_empty(&self) -> bool {
        self.interleaved.is_empty()
    }

    pub fn get(&self, i: usize) -> (f32, f32) {
        (self.interleaved[2 * i], self.interleaved[2 * i + 1])
    }

    pub fn modulus(&self, i: usize) -> f32 {
        let (re, im) = self.get(i);
        re.hypot(im)
    }

    pub fn conj(&self) -> Self {
        Self {
            interleaved: self
                .interleaved
                .chunks(2)
                .flat_map(|c| [c[0], -c[1]])
                .collect(),
        }
    }

    pub fn as_interleaved(&self) -> &[f32] {
        &self.interleaved
    }
}

/// Elementwise complex product `delta_i * v_i`.
pub fn rotate(delta: &ComplexVec, v: &ComplexVec) -> Result<ComplexVec> {
    contract!(
        delta.len() == v.len(),
        "rotate: rotation has {} coordinates, vector has {}",
        delta.len(),
        v.len()
    );
    let interleaved = delta
        .interleaved
        .chunks(2)
        .zip(v.interleaved.chunks(2))
        .flat_map(|(d, x)| [d[0] * x[0] - d[1] * x[1], d[0] * x[1] + d[1] * x[0]])
        .collect();
    Ok(ComplexVec { interleaved })
}

// ---------------------------------------------------------------------------
// model

/// Configuration plus stored parameters, with single-query convenience
/// entry points. All forward passes here are pure.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor<f32>>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Ok(Self { config, params })
    }

    fn check_rows(&self, data: &[f32], width: usize, what: &str) -> Result<usize> {
        contract!(
            !data.is_empty() && data.len().is_multiple_of(width),
            "{what}: {} values is not a whole number of rows of width {width}",
            data.len()
        );
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("{what} contains non-finite values")));
        }
        Ok(data.len() / width)
    }

    fn rotation_params(&self) -> Result<&ComposeAEParams<Tensor<f32>>> {
        match &self.params.composer {
            Composer::Rotation(p) => Ok(p),
            _ => Err(Error::Contract(format!(
                "variant {} has no rotation block",
                self.config.variant
            ))),
        }
    }

    /// Angles and unit rotation for one text feature vector.
    pub fn text_to_rotation(&self, q: &[f32]) -> Result<(Vec<f32>, ComplexVec)> {
        contract!(
            q.len() == self.config.h,
            "text features have length {}, expected {}",
            q.len(),
            self.config.h
        );
        let p = self.rotation_params()?;
        let mut tape = Tape::<f32>::new();
        let bound = p.map("", &mut |_, t| tape.constant(t.clone()));
        let qv = tape.constant(Tensor::matrix(1, q.len(), q.to_vec())?);
        let theta = bound.angles(&mut tape, qv)?;
        let theta = tape.value(theta).data().to_vec();
        let delta = ComplexVec::from_angles(&theta);
        Ok((theta, delta))
    }

    /// Composed embeddings for a batch of rows (`z`: n x d, `q`: n x h).
    pub fn compose_batch(&self, z: &[f32], q: &[f32]) -> Result<Vec<f32>> {
        self.run_composer(z, q, false)
    }

    /// Conjugate-path embeddings for target rows `y` (n x d).
    pub fn compose_conjugate_batch(&self, y: &[f32], q: &[f32]) -> Result<Vec<f32>> {
        self.rotation_params()?;
        self.run_composer(y, q, true)
    }

    fn run_composer(&self, x: &[f32], q: &[f32], conjugate: bool) -> Result<Vec<f32>> {
        let n = self.check_rows(x, self.config.d, "image features")?;
        let nq = self.check_rows(q, self.config.h, "text features")?;
        contract!(n == nq, "{n} image rows but {nq} text rows");
        let mut tape = Tape::<f32>::new();
        let bound = self.params.bind(&mut tape, false);
        let xv = tape.constant(Tensor::matrix(n, self.config.d, x.to_vec())?);
        let qv = tape.constant(Tensor::matrix(n, self.config.h, q.to_vec())?);
        let out = if conjugate {
            bound
                .compose_conjugate(&mut tape, &self.config, xv, qv)?
                .expect("checked rotation block")
        } else {
            bound.compose(&mut tape, &self.config, xv, qv)?
        };
        Ok(tape.value(out).data().to_vec())
    }

    /// Composed embedding of a single query.
    pub fn compose(&self, z: &[f32], q: &[f32]) -> Result<Vec<f32>> {
        contract!(z.len() == self.config.d, "image features have length {}, expected {}", z.len(), self.config.d);
        self.compose_batch(z, q)
    }

    pub fn compose_conjugate(&self, y: &[f32], q: &[f32]) -> Result<Vec<f32>> {
        contract!(y.len() == self.config.d, "target features have length {}, expected {}", y.len(), self.config.d);
        self.compose_conjugate_batch(y, q)
    }

    /// Gated residual composition; the model must be the `tirg` variant.
    pub fn tirg_compose(&self, z: &[f32], q: &[f32]) -> Result<Vec<f32>> {
        contract!(
            matches!(self.params.composer, Composer::Tirg(_)),
            "tirg_compose on a {} model",
            self.config.variant
        );
        self.compose(z, q)
    }

    /// Concatenation composition; the model must be `concat` or `composeae_concat`.
    pub fn concat_compose(&self, z: &[f32], q: &[f32]) -> Result<Vec<f32>> {
        contract!(
            matches!(self.params.composer, Composer::Concat(_)),
            "concat_compose on a {} model",
            self.config.variant
        );
        self.compose(z, q)
    }

    /// Image and text reconstructions `(z_hat, q_hat)` of one composed vector.
    pub fn decode(&self, composed: &[f32]) -> Result<(Vec<f32>, Vec<f32>)> {
        contract!(
            composed.len() == self.config.d,
            "decode input has length {}, expected {}",
            composed.len(),
            self.config.d
        );
        let mut tape = Tape::<f32>::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(Tensor::matrix(1, composed.len(), composed.to_vec())?);
        let (z_hat, q_hat) = bound.decode(&mut tape, x)?;
        Ok((tape.value(z_hat).data().to_vec(), tape.value(q_hat).data().to_vec()))
    }
}
