//! Mini-batch training, checkpoints and per-run metrics.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::composition::{Model, ModelConfig, ModelParams};
use crate::data::{self, Batch, FeatureDataset};
use crate::error::{Error, Result};
use crate::evaluation::{self, RecallAtK};
use crate::losses::{self, BaseLoss, LossComponents, LossWeights};
use crate::numerics::{grad_check_detailed, sgd_momentum_step, GradCheckReport, OptimState, Scalar, Tape, Tensor, Var};

pub const CHECKPOINT_VERSION: &str = "CCK1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub learning_rate: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub repeats: usize,
    /// Epochs between held-out evaluations; 0 disables them.
    pub eval_every: usize,
    /// Recall cutoffs, strictly ascending.
    pub ks: Vec<usize>,
    /// L2-normalize both sides before scoring at evaluation time.
    pub normalize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            learning_rate: 1e-2,
            momentum: 0.9,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            repeats: 5,
            eval_every: 1,
            ks: vec![1, 5, 10, 50],
            normalize: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if self.ks.is_empty() || self.ks[0] == 0 || self.ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("ks must be positive and strictly ascending, got {:?}", self.ks)));
        }
        OptimState::new(self.learning_rate, self.momentum, std::iter::empty())?;
        Ok(())
    }

    fn check_dataset(&self, ds: &FeatureDataset, what: &str) -> Result<()> {
        if ds.d != self.model.d || ds.h != self.model.h {
            return Err(Error::Config(format!(
                "{what} dataset has d = {}, h = {} but model.d = {}, model.h = {}",
                ds.d, ds.h, self.model.d, self.model.h
            )));
        }
        Ok(())
    }
}

/// Mean losses over one epoch, plus recall when the epoch was evaluated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_base: f64,
    pub l_sym: f64,
    pub l_ri: f64,
    pub l_rt: f64,
    pub l_t: f64,
    #[serde(default)]
    pub recall: Vec<RecallAtK>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsHistory {
    pub seed: u64,
    pub base_loss: BaseLoss,
    pub records: Vec<EpochRecord>,
}

impl MetricsHistory {
    /// Most recent recall@k, if any epoch was evaluated.
    pub fn last_recall(&self, k: usize) -> Option<f64> {
        self.records
            .iter()
            .rev()
            .find_map(|r| r.recall.iter().find(|x| x.k == k).map(|x| x.recall))
    }

    /// Final-epoch losses and last recalls, keyed by metric name.
    pub fn final_metrics(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        if let Some(r) = self.records.last() {
            out.insert("l_base".into(), r.l_base);
            out.insert("l_sym".into(), r.l_sym);
            out.insert("l_ri".into(), r.l_ri);
            out.insert("l_rt".into(), r.l_rt);
            out.insert("l_t".into(), r.l_t);
        }
        if let Some(r) = self.records.iter().rev().find(|r| !r.recall.is_empty()) {
            for x in &r.recall {
                out.insert(format!("recall@{}", x.k), x.recall);
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
}

/// Mean and standard deviation of every final metric across repeats.
pub fn summarize(runs: &[MetricsHistory]) -> BTreeMap<String, MeanStd> {
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for run in runs {
        for (k, v) in run.final_metrics() {
            values.entry(k).or_default().push(v);
        }
    }
    values
        .into_iter()
        .map(|(k, v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let std = if v.len() > 1 {
                (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            (k, MeanStd { mean, std })
        })
        .collect()
}

/// Losses of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub components: LossComponents,
    pub total: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    /// Hex-encoded 32-byte seed.
    pub seed: String,
    pub stream: u64,
    /// Decimal word position (a u128 does not fit JSON numbers).
    pub word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Format(format!("bad rng state {self:?}"));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

/// Complete training state: resuming from it continues the run exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    /// Momentum buffers in parameter order.
    pub velocity: Vec<Tensor<f32>>,
    pub step: u64,
    pub epoch: usize,
    pub rng: RngState,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: String,
    config: TrainConfig,
    step: u64,
    epoch: usize,
    rng: RngState,
    tensors: Vec<TensorEntry>,
}

const VELOCITY_PREFIX: &str = "velocity/";

impl Checkpoint {
    /// Single-line JSON header, a newline, then every parameter followed by
    /// every velocity buffer as little-endian `f32`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let named = self.model.params.named();
        let mut tensors = Vec::new();
        let mut blob: Vec<u8> = Vec::new();
        let velocity_names = named.iter().map(|(n, _)| format!("{VELOCITY_PREFIX}{n}"));
        let all = named
            .iter()
            .map(|(n, t)| (n.clone(), *t))
            .chain(velocity_names.zip(&self.velocity));
        for (name, t) in all {
            tensors.push(TensorEntry { name, shape: t.shape().to_vec(), offset: blob.len() });
            blob.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
        }
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION.into(),
            config: self.config.clone(),
            step: self.step,
            epoch: self.epoch,
            rng: self.rng.clone(),
            tensors,
        };
        if let Some(dir) = path.as_ref().parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let mut f = fs::File::create(path)?;
        f.write_all(serde_json::to_string(&header)?.as_bytes())?;
        f.write_all(b"\n")?;
        f.write_all(&blob)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path.as_ref())?;
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("checkpoint has no header line".into()))?;
        let raw: serde_json::Value = serde_json::from_slice(&bytes[..split])
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        match raw.get("version").and_then(|v| v.as_str()) {
            Some(CHECKPOINT_VERSION) => {}
            Some(other) => {
                return Err(Error::UnsupportedVersion(format!("checkpoint version {other:?}")))
            }
            None => return Err(Error::Format("checkpoint header has no version".into())),
        }
        let header: CheckpointHeader = serde_json::from_value(raw)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let blob = &bytes[split + 1..];
        let by_name: BTreeMap<&str, &TensorEntry> =
            header.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let read = |name: &str, shape: &[usize]| -> Result<Tensor<f32>> {
            let entry = by_name
                .get(name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name}")))?;
            if entry.shape != shape {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?} but the model config implies {shape:?}",
                    entry.shape
                )));
            }
            let len: usize = shape.iter().product();
            let end = entry.offset + 4 * len;
            if end > blob.len() {
                return Err(Error::Format(format!("tensor {name} runs past the end of the blob")));
            }
            let data = blob[entry.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Tensor::new(shape.to_vec(), data)
        };

        header.config.validate()?;
        let skeleton = ModelParams::init(&header.config.model, 0)?;
        let named = skeleton.named();
        if header.tensors.len() != 2 * named.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, the model config implies {}",
                header.tensors.len(),
                2 * named.len()
            )));
        }
        let mut params = Vec::with_capacity(named.len());
        let mut velocity = Vec::with_capacity(named.len());
        for (name, t) in &named {
            params.push(read(name, t.shape())?);
            velocity.push(read(&format!("{VELOCITY_PREFIX}{name}"), t.shape())?);
        }
        let mut model = Model { config: header.config.model.clone(), params: skeleton };
        for (slot, t) in model.params.leaves_mut().into_iter().zip(params) {
            *slot = t;
        }
        header.rng.restore()?;
        Ok(Self {
            config: header.config,
            model,
            velocity,
            step: header.step,
            epoch: header.epoch,
            rng: header.rng,
        })
    }
}

/// Feature rows of one mini-batch. Negatives are `[n * m, d]`, grouped by
/// sample, and present only for the triplet form.
#[derive(Clone, Debug)]
pub struct BatchTensors<T: Scalar> {
    pub z: Tensor<T>,
    pub q: Tensor<T>,
    pub y: Tensor<T>,
    pub negatives: Option<Tensor<T>>,
    pub query_negatives: Option<Tensor<T>>,
}

/// Loss nodes of one objective graph; disabled terms are `None`.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveGraph {
    pub composed: Var,
    pub base: Var,
    pub sym: Option<Var>,
    pub ri: Option<Var>,
    pub rt: Option<Var>,
    pub total: Var,
}

impl ObjectiveGraph {
    pub fn components<T: Scalar>(&self, tape: &Tape<T>) -> LossComponents {
        let val = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).data()[0].as_f32());
        LossComponents { base: val(Some(self.base)), sym: val(self.sym), ri: val(self.ri), rt: val(self.rt) }
    }
}

/// Builds `L_T` for one batch on `tape`. The symmetry term is built only for
/// variants with a rotation block and positive `lambda_sym`; reconstruction
/// terms only for variants with decoders and positive weights.
pub fn objective_graph<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ModelParams<Var>,
    model: &ModelConfig,
    weights: &LossWeights,
    base: BaseLoss,
    data: &BatchTensors<T>,
) -> Result<ObjectiveGraph> {
    let m = weights.m;
    let z = tape.constant(data.z.clone());
    let q = tape.constant(data.q.clone());
    let y = tape.constant(data.y.clone());
    let negatives = data.negatives.clone().map(|t| tape.constant(t));
    let composed = params.compose(tape, model, z, q)?;
    let base_node = losses::base_loss(tape, base, composed, y, negatives, m)?;

    let sym = if model.variant.uses_symmetry() && weights.lambda_sym > 0.0 {
        let conj = params
            .compose_conjugate(tape, model, y, q)?
            .expect("variant has a rotation block");
        let zneg = data.query_negatives.clone().map(|t| tape.constant(t));
        Some(losses::rotational_symmetry(tape, base, conj, z, zneg, m)?)
    } else {
        None
    };

    let recon = model.variant.uses_reconstruction();
    let (ri_on, rt_on) = (recon && weights.lambda_ri > 0.0, recon && weights.lambda_rt > 0.0);
    let (mut ri, mut rt) = (None, None);
    if ri_on || rt_on {
        let (z_hat, q_hat) = params.decode(tape, composed)?;
        if ri_on {
            ri = Some(losses::reconstruction(tape, z, z_hat)?);
        }
        if rt_on {
            rt = Some(losses::reconstruction(tape, q, q_hat)?);
        }
    }
    let total = losses::total(tape, weights, base_node, sym, ri, rt)?;
    Ok(ObjectiveGraph { composed, base: base_node, sym, ri, rt, total })
}

/// Central-difference check of the whole objective in `f64` with respect to
/// every parameter, on a random batch of `n` rows drawn from `seed`.
/// Biases and mixing scalars are redrawn so no path starts at zero.
pub fn objective_grad_check(
    model: &ModelConfig,
    weights: &LossWeights,
    base: BaseLoss,
    n: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    model.validate()?;
    weights.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::init(model, seed)?;
    params.visit_mut(&mut |_, t| {
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5f32..0.5));
    });
    let mut matrix = |rows: usize, cols: usize| -> Result<Tensor<f64>> {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect())
    };
    let m = weights.m;
    let data = BatchTensors {
        z: matrix(n, model.d)?,
        q: matrix(n, model.h)?,
        y: matrix(n, model.d)?,
        negatives: (base == BaseLoss::St).then(|| matrix(n * m, model.d)).transpose()?,
        query_negatives: (base == BaseLoss::St).then(|| matrix(n * m, model.d)).transpose()?,
    };
    let named = params.named();
    let index: BTreeMap<String, usize> = named.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
    let inputs: Vec<Tensor<f64>> = named.iter().map(|(_, t)| t.cast::<f64>()).collect();
    let f = |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
        let bound = params.map(&mut |name, _| vars[index[name]]);
        Ok(objective_graph(tape, &bound, model, weights, base, &data)?.total)
    };
    grad_check_detailed(f, &inputs, 1e-6, None)
}

/// Owns the parameters, optimizer and sampling rng of one training run.
pub struct Trainer<'a> {
    config: TrainConfig,
    model: Model,
    optim: OptimState,
    rng: ChaCha8Rng,
    step: u64,
    epoch: usize,
    base: BaseLoss,
    train: &'a FeatureDataset,
    eval: Option<&'a FeatureDataset>,
    gallery_groups: Vec<Option<u64>>,
    history: MetricsHistory,
}

/// Stream of the sampling rng; parameter init uses the default stream.
const SAMPLING_STREAM: u64 = 1;

impl<'a> Trainer<'a> {
    pub fn new(
        config: TrainConfig,
        train: &'a FeatureDataset,
        eval: Option<&'a FeatureDataset>,
    ) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model.clone(), config.seed)?;
        let shapes: Vec<Vec<usize>> = model.params.leaves().iter().map(|t| t.shape().to_vec()).collect();
        let optim = OptimState::new(config.learning_rate, config.momentum, shapes.iter().map(|s| s.as_slice()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(SAMPLING_STREAM);
        Self::assemble(config, model, optim, rng, 0, 0, train, eval)
    }

    /// Continues a run from `checkpoint`.
    pub fn from_checkpoint(
        checkpoint: Checkpoint,
        train: &'a FeatureDataset,
        eval: Option<&'a FeatureDataset>,
    ) -> Result<Self> {
        let Checkpoint { config, model, velocity, step, epoch, rng } = checkpoint;
        let optim = OptimState::from_velocity(config.learning_rate, config.momentum, velocity)?;
        let rng = rng.restore()?;
        Self::assemble(config, model, optim, rng, step, epoch, train, eval)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: TrainConfig,
        model: Model,
        optim: OptimState,
        rng: ChaCha8Rng,
        step: u64,
        epoch: usize,
        train: &'a FeatureDataset,
        eval: Option<&'a FeatureDataset>,
    ) -> Result<Self> {
        config.check_dataset(train, "training")?;
        if let Some(e) = eval {
            config.check_dataset(e, "evaluation")?;
        }
        if config.batch_size > train.n {
            return Err(Error::Config(format!(
                "batch_size {} exceeds the {} training samples",
                config.batch_size, train.n
            )));
        }
        let base = config.weights.base.or(train.base_loss).unwrap_or(BaseLoss::Smax);
        let history = MetricsHistory { seed: config.seed, base_loss: base, records: Vec::new() };
        Ok(Self {
            gallery_groups: train.gallery_groups(),
            config,
            model,
            optim,
            rng,
            step,
            epoch,
            base,
            train,
            eval,
            history,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn base_loss(&self) -> BaseLoss {
        self.base
    }

    pub fn history(&self) -> &MetricsHistory {
        &self.history
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            model: self.model.clone(),
            velocity: self.optim.velocity().to_vec(),
            step: self.step,
            epoch: self.epoch,
            rng: RngState::capture(&self.rng),
        }
    }

    fn sym_active(&self) -> bool {
        self.config.model.variant.uses_symmetry() && self.config.weights.lambda_sym > 0.0
    }

    /// Draws the negatives this configuration needs for `samples`.
    pub fn make_batch(&mut self, samples: Vec<usize>) -> Result<Batch> {
        let m = self.config.weights.m;
        let (mut negative_indices, mut query_negatives) = (Vec::new(), Vec::new());
        if self.base == BaseLoss::St {
            negative_indices =
                data::sample_negatives(self.train, &self.gallery_groups, &samples, m, &mut self.rng)?;
            if self.sym_active() {
                query_negatives = data::sample_query_negatives(self.train, &samples, m, &mut self.rng)?;
            }
        }
        Ok(Batch { sample_indices: samples, negative_indices, query_negatives })
    }

    fn rows(&self, indices: impl Iterator<Item = usize>, width: usize, src: impl Fn(usize) -> &'a [f32]) -> Result<Tensor<f32>> {
        let mut data = Vec::new();
        let mut n = 0;
        for i in indices {
            data.extend_from_slice(src(i));
            n += 1;
        }
        Tensor::matrix(n, width, data)
    }

    fn batch_tensors(&self, batch: &Batch) -> Result<BatchTensors<f32>> {
        let ds = self.train;
        let (d, h) = (ds.d, ds.h);
        let idx = &batch.sample_indices;
        let flat = |v: &Vec<Vec<usize>>| v.iter().flatten().copied().collect::<Vec<_>>();
        let negatives = if self.base == BaseLoss::St {
            Some(self.rows(flat(&batch.negative_indices).into_iter(), d, |j| ds.target(j))?)
        } else {
            None
        };
        let query_negatives = if self.base == BaseLoss::St && self.sym_active() {
            Some(self.rows(flat(&batch.query_negatives).into_iter(), d, |i| ds.query(i))?)
        } else {
            None
        };
        Ok(BatchTensors {
            z: self.rows(idx.iter().copied(), d, |i| ds.query(i))?,
            q: self.rows(idx.iter().copied(), h, |i| ds.text(i))?,
            y: self.rows(idx.iter().map(|&i| ds.target_index[i]), d, |j| ds.target(j))?,
            negatives,
            query_negatives,
        })
    }

    /// Builds the full objective for `batch` on a fresh tape.
    fn objective(&self, batch: &Batch) -> Result<(Tape<f32>, ModelParams<Var>, Var, LossComponents)> {
        let data = self.batch_tensors(batch)?;
        let mut tape = Tape::<f32>::new();
        let bound = self.model.params.bind(&mut tape, true);
        let graph = objective_graph(&mut tape, &bound, &self.config.model, &self.config.weights, self.base, &data)?;
        let components = graph.components(&tape);
        for (name, v) in [
            ("base", components.base),
            ("sym", components.sym),
            ("ri", components.ri),
            ("rt", components.rt),
            ("total", tape.value(graph.total).data()[0]),
        ] {
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "step {}: loss component {name} is {v}",
                    self.step
                )));
            }
        }
        Ok((tape, bound, graph.total, components))
    }

    /// Objective on `batch` at the current parameters, without updating.
    pub fn loss_on(&self, batch: &Batch) -> Result<StepLosses> {
        let (tape, _, total, components) = self.objective(batch)?;
        Ok(StepLosses { components, total: tape.value(total).data()[0] })
    }

    /// Named parameter gradients of the objective on `batch`.
    pub fn gradients_on(&self, batch: &Batch) -> Result<Vec<(String, Tensor<f32>)>> {
        let (tape, bound, total, _) = self.objective(batch)?;
        let grads = tape.backward(total)?;
        Ok(bound
            .named()
            .into_iter()
            .map(|(name, &var)| (name, grads.get_or_zeros(&tape, var)))
            .collect())
    }

    /// One optimizer step on `batch`; returns the losses before the update.
    pub fn step_on(&mut self, batch: &Batch) -> Result<StepLosses> {
        let (tape, bound, total, components) = self.objective(batch)?;
        let grads = tape.backward(total).map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("step {}: {msg}", self.step)),
            other => other,
        })?;
        let grad_tensors: Vec<Tensor<f32>> = bound
            .leaves()
            .into_iter()
            .map(|&var| grads.get_or_zeros(&tape, var))
            .collect();
        let total = tape.value(total).data()[0];
        drop(tape);
        let mut params = self.model.params.leaves_mut();
        sgd_momentum_step(&mut params, &grad_tensors, &mut self.optim)?;
        self.step += 1;
        Ok(StepLosses { components, total })
    }

    /// One pass over the shuffled training set, then an evaluation when due.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let batches = data::epoch_batches(self.train.n, self.config.batch_size, &mut self.rng);
        let mut sums = [0.0f64; 5];
        for samples in &batches {
            let batch = self.make_batch(samples.clone())?;
            let s = self.step_on(&batch)?;
            let c = s.components;
            for (acc, v) in sums.iter_mut().zip([c.base, c.sym, c.ri, c.rt, s.total]) {
                *acc += v as f64;
            }
        }
        self.epoch += 1;
        let n = batches.len().max(1) as f64;
        let mut record = EpochRecord {
            epoch: self.epoch,
            l_base: sums[0] / n,
            l_sym: sums[1] / n,
            l_ri: sums[2] / n,
            l_rt: sums[3] / n,
            l_t: sums[4] / n,
            recall: Vec::new(),
        };
        if let Some(eval) = self.eval {
            if self.config.eval_every > 0 && self.epoch.is_multiple_of(self.config.eval_every) {
                let report = evaluation::evaluate(&self.model, eval, &self.config.ks, self.config.normalize)?;
                record.recall = report.recall;
            }
        }
        self.history.records.push(record.clone());
        Ok(record)
    }

    /// Runs epochs until `config.epochs` have completed.
    pub fn run(&mut self) -> Result<()> {
        while self.epoch < self.config.epochs {
            self.run_epoch()?;
        }
        Ok(())
    }

    pub fn finish(self) -> (Checkpoint, MetricsHistory) {
        (self.checkpoint(), self.history)
    }
}

/// Trains one run of `config` from scratch.
pub fn train(
    config: &TrainConfig,
    dataset: &FeatureDataset,
    eval: Option<&FeatureDataset>,
) -> Result<(Checkpoint, MetricsHistory)> {
    let mut trainer = Trainer::new(config.clone(), dataset, eval)?;
    trainer.run()?;
    Ok(trainer.finish())
}
