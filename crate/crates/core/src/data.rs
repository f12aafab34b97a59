//! Feature datasets: the CRF1 on-disk format, a synthetic generator with a
//! planted rotation, and mini-batch sampling.
//!
//! A CRF1 dataset is a JSON manifest plus three headerless little-endian
//! `f32` blobs (query image features `n x d`, text features `n x h`, gallery
//! target features `g x d`), row-major, with paths relative to the manifest.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::losses::BaseLoss;

pub const FORMAT_VERSION: &str = "CRF1";

/// Standard deviation of the noise added to synthetic concept codes.
const TEXT_NOISE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDataset {
    pub n: usize,
    pub g: usize,
    pub d: usize,
    pub h: usize,
    /// `n x d`
    pub query_feats: Vec<f32>,
    /// `n x h`
    pub text_feats: Vec<f32>,
    /// `g x d`
    pub target_feats: Vec<f32>,
    pub target_index: Vec<usize>,
    /// Samples with equal labels accept each other's targets.
    pub target_group: Vec<u64>,
    pub base_loss: Option<BaseLoss>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Blobs {
    query: String,
    text: String,
    target: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    version: String,
    n: usize,
    g: usize,
    d: usize,
    h: usize,
    blobs: Blobs,
    target_index: Vec<usize>,
    target_group: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    base_loss: Option<BaseLoss>,
}

impl FeatureDataset {
    pub fn query(&self, i: usize) -> &[f32] {
        &self.query_feats[i * self.d..(i + 1) * self.d]
    }

    pub fn text(&self, i: usize) -> &[f32] {
        &self.text_feats[i * self.h..(i + 1) * self.h]
    }

    pub fn target(&self, j: usize) -> &[f32] {
        &self.target_feats[j * self.d..(j + 1) * self.d]
    }

    /// Group label of every gallery entry; `None` for entries no sample
    /// points at (pure distractors).
    pub fn gallery_groups(&self) -> Vec<Option<u64>> {
        let mut groups = vec![None; self.g];
        for (&j, &grp) in self.target_index.iter().zip(&self.target_group) {
            groups[j] = Some(grp);
        }
        groups
    }

    pub fn validate(&self) -> Result<()> {
        let fmt = |m: String| Err(Error::Format(m));
        if self.n == 0 || self.g == 0 || self.d == 0 || self.h == 0 {
            return fmt(format!(
                "dimensions must be positive: n={} g={} d={} h={}",
                self.n, self.g, self.d, self.h
            ));
        }
        for (name, data, expected) in [
            ("query", &self.query_feats, self.n * self.d),
            ("text", &self.text_feats, self.n * self.h),
            ("target", &self.target_feats, self.g * self.d),
        ] {
            if data.len() != expected {
                return fmt(format!("{name} features hold {} floats, expected {expected}", data.len()));
            }
            if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
                return fmt(format!("{name} features contain a non-finite value at flat index {pos}"));
            }
        }
        if self.target_index.len() != self.n || self.target_group.len() != self.n {
            return fmt(format!(
                "target_index has {} entries and target_group {}, expected n = {}",
                self.target_index.len(),
                self.target_group.len(),
                self.n
            ));
        }
        if let Some((i, &j)) = self.target_index.iter().enumerate().find(|(_, &j)| j >= self.g) {
            return fmt(format!("target_index[{i}] = {j} is out of range for g = {}", self.g));
        }
        let mut owner: HashMap<usize, u64> = HashMap::new();
        for (i, (&j, &grp)) in self.target_index.iter().zip(&self.target_group).enumerate() {
            if let Some(&prev) = owner.get(&j) {
                if prev != grp {
                    return fmt(format!(
                        "gallery entry {j} is the target of groups {prev} and {grp} (sample {i})"
                    ));
                }
            }
            owner.insert(j, grp);
        }
        Ok(())
    }

    /// Writes the manifest to `manifest_path` and the blobs beside it as
    /// `<stem>.query.f32`, `<stem>.text.f32` and `<stem>.target.f32`.
    pub fn save(&self, manifest_path: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        let manifest_path = manifest_path.as_ref();
        let dir = manifest_path.parent().unwrap_or(Path::new(""));
        let stem = manifest_path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Config(format!("bad manifest path {}", manifest_path.display())))?;
        let blobs = Blobs {
            query: format!("{stem}.query.f32"),
            text: format!("{stem}.text.f32"),
            target: format!("{stem}.target.f32"),
        };
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
        fs::write(dir.join(&blobs.query), f32_to_le_bytes(&self.query_feats))?;
        fs::write(dir.join(&blobs.text), f32_to_le_bytes(&self.text_feats))?;
        fs::write(dir.join(&blobs.target), f32_to_le_bytes(&self.target_feats))?;
        let manifest = Manifest {
            version: FORMAT_VERSION.to_string(),
            n: self.n,
            g: self.g,
            d: self.d,
            h: self.h,
            blobs,
            target_index: self.target_index.clone(),
            target_group: self.target_group.clone(),
            base_loss: self.base_loss,
        };
        fs::write(manifest_path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Splits into the first `n_first` samples and the rest. Each part keeps
    /// only the gallery entries its samples point at, in first-use order.
    pub fn split_at(&self, n_first: usize) -> Result<(FeatureDataset, FeatureDataset)> {
        contract!(
            n_first > 0 && n_first < self.n,
            "split point {n_first} must lie strictly inside 1..{}",
            self.n
        );
        Ok((self.subset(0..n_first), self.subset(n_first..self.n)))
    }

    fn subset(&self, range: std::ops::Range<usize>) -> FeatureDataset {
        let mut remap: HashMap<usize, usize> = HashMap::new();
        let mut target_feats = Vec::new();
        let mut target_index = Vec::with_capacity(range.len());
        for i in range.clone() {
            let j = self.target_index[i];
            let next = remap.len();
            let new_j = *remap.entry(j).or_insert_with(|| {
                target_feats.extend_from_slice(self.target(j));
                next
            });
            target_index.push(new_j);
        }
        FeatureDataset {
            n: range.len(),
            g: remap.len(),
            d: self.d,
            h: self.h,
            query_feats: self.query_feats[range.start * self.d..range.end * self.d].to_vec(),
            text_feats: self.text_feats[range.start * self.h..range.end * self.h].to_vec(),
            target_feats,
            target_index,
            target_group: self.target_group[range].to_vec(),
            base_loss: self.base_loss,
        }
    }
}

fn f32_to_le_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn read_blob(dir: &Path, name: &str, file: &str, rows: usize, cols: usize, dim_name: &str) -> Result<Vec<f32>> {
    let path: PathBuf = dir.join(file);
    let bytes = fs::read(&path).map_err(|e| {
        Error::Format(format!("blob {name} ({}) cannot be read: {e}", path.display()))
    })?;
    let expected = rows * cols * 4;
    if bytes.len() != expected {
        let msg = if bytes.len() % 4 == 0 && (bytes.len() / 4) % rows == 0 {
            format!(
                "blob {name} ({}): manifest {dim_name} = {cols} but blob length implies {}",
                path.display(),
                bytes.len() / 4 / rows
            )
        } else {
            format!(
                "blob {name} ({}) has {} bytes, expected {expected} ({rows} x {cols} floats)",
                path.display(),
                bytes.len()
            )
        };
        return Err(Error::Format(msg));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Reads and fully validates a CRF1 dataset.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<FeatureDataset> {
    let manifest_path = manifest_path.as_ref();
    let text = fs::read_to_string(manifest_path)?;
    let raw: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("manifest {}: {e}", manifest_path.display())))?;
    match raw.get("version").and_then(|v| v.as_str()) {
        Some(FORMAT_VERSION) => {}
        Some(other) => return Err(Error::UnsupportedVersion(format!("dataset version {other:?}"))),
        None => return Err(Error::Format("manifest has no version".into())),
    }
    let m: Manifest = serde_json::from_value(raw)
        .map_err(|e| Error::Format(format!("manifest {}: {e}", manifest_path.display())))?;
    if m.n == 0 || m.g == 0 || m.d == 0 || m.h == 0 {
        return Err(Error::Format(format!(
            "dimensions must be positive: n={} g={} d={} h={}",
            m.n, m.g, m.d, m.h
        )));
    }
    let dir = manifest_path.parent().unwrap_or(Path::new(""));
    let query_feats = read_blob(dir, "query", &m.blobs.query, m.n, m.d, "d")?;
    let text_feats = read_blob(dir, "text", &m.blobs.text, m.n, m.h, "h")?;
    let target_feats = read_blob(dir, "target", &m.blobs.target, m.g, m.d, "d")?;
    let ds = FeatureDataset {
        n: m.n,
        g: m.g,
        d: m.d,
        h: m.h,
        query_feats,
        text_feats,
        target_feats,
        target_index: m.target_index,
        target_group: m.target_group,
        base_loss: m.base_loss,
    };
    ds.validate()?;
    Ok(ds)
}

// ---------------------------------------------------------------------------
// synthetic data

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n: usize,
    /// Gallery size, at least `n`; entries past `n` are distractors.
    pub g: usize,
    pub d: usize,
    pub h: usize,
    /// Complex dimension of the planted rotation.
    pub k_true: usize,
    pub noise_sigma: f64,
    pub num_text_concepts: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { n: 2500, g: 2500, d: 64, h: 32, k_true: 32, noise_sigma: 0.05, num_text_concepts: 8, seed: 0 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n", self.n),
            ("g", self.g),
            ("d", self.d),
            ("h", self.h),
            ("k_true", self.k_true),
            ("num_text_concepts", self.num_text_concepts),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("synth.{name} must be positive")));
            }
        }
        if self.g < self.n {
            return Err(Error::Config(format!(
                "synth.g = {} is smaller than synth.n = {}; every sample owns a gallery entry",
                self.g, self.n
            )));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("synth.noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        Ok(())
    }
}

/// Ground truth behind a synthetic dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedMap {
    pub d: usize,
    pub k: usize,
    /// Real form of the complex embedding, `2k x d`, rows interleaved
    /// `(re, im)`. Its columns (or rows, when `2k < d`) are orthonormal, so
    /// the transpose is the pseudo-inverse.
    pub embedding: Vec<f64>,
    /// One angle vector of length `k` per concept.
    pub angles: Vec<Vec<f64>>,
    /// Concept of every gallery entry (samples first, then distractors).
    pub concepts: Vec<usize>,
}

impl PlantedMap {
    /// `E⁺ (exp(j θ_c) ⊙ E z)`, noise free.
    pub fn apply(&self, z: &[f32], concept: usize) -> Vec<f32> {
        self.apply_with_angles(z, &self.angles[concept])
    }

    pub fn apply_with_angles(&self, z: &[f32], angles: &[f64]) -> Vec<f32> {
        let (d, k) = (self.d, self.k);
        let mut lifted = vec![0.0f64; 2 * k];
        for (r, out) in lifted.iter_mut().enumerate() {
            let row = &self.embedding[r * d..(r + 1) * d];
            *out = row.iter().zip(z).map(|(&e, &zv)| e * zv as f64).sum();
        }
        for (c, &t) in lifted.chunks_mut(2).zip(angles) {
            let (re, im) = (c[0], c[1]);
            let (s, co) = t.sin_cos();
            c[0] = co * re - s * im;
            c[1] = s * re + co * im;
        }
        (0..d)
            .map(|col| {
                (0..2 * k)
                    .map(|r| self.embedding[r * d + col] * lifted[r])
                    .sum::<f64>() as f32
            })
            .collect()
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `rows x cols` Gaussian matrix orthonormalized along its shorter side
/// with modified Gram-Schmidt.
fn partial_isometry(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let mut m: Vec<f64> = (0..rows * cols).map(|_| gaussian(rng)).collect();
    let by_columns = rows >= cols;
    let (count, len) = if by_columns { (cols, rows) } else { (rows, cols) };
    let idx = |v: usize, e: usize| if by_columns { e * cols + v } else { v * cols + e };
    for v in 0..count {
        for u in 0..v {
            let dot: f64 = (0..len).map(|e| m[idx(u, e)] * m[idx(v, e)]).sum();
            for e in 0..len {
                m[idx(v, e)] -= dot * m[idx(u, e)];
            }
        }
        let norm = (0..len).map(|e| m[idx(v, e)].powi(2)).sum::<f64>().sqrt();
        for e in 0..len {
            m[idx(v, e)] /= norm;
        }
    }
    m
}

/// Synthetic dataset in which every target is the query rotated in a
/// hidden complex space by an angle vector chosen by the text concept.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<FeatureDataset> {
    gen_synthetic_with_truth(cfg).map(|(ds, _)| ds)
}

/// As [`gen_synthetic`], also returning the planted map.
pub fn gen_synthetic_with_truth(cfg: &SynthConfig) -> Result<(FeatureDataset, PlantedMap)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (d, h, k) = (cfg.d, cfg.h, cfg.k_true);
    let embedding = partial_isometry(&mut rng, 2 * k, d);
    let angles: Vec<Vec<f64>> = (0..cfg.num_text_concepts)
        .map(|_| {
            (0..k)
                .map(|_| rng.random_range(-std::f64::consts::PI..std::f64::consts::PI))
                .collect()
        })
        .collect();
    let codes: Vec<Vec<f64>> = (0..cfg.num_text_concepts)
        .map(|c| {
            if c < h {
                (0..h).map(|e| if e == c { 1.0 } else { 0.0 }).collect()
            } else {
                let v: Vec<f64> = (0..h).map(|_| gaussian(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / norm).collect()
            }
        })
        .collect();
    let mut truth = PlantedMap { d, k, embedding, angles, concepts: Vec::with_capacity(cfg.g) };

    let mut query_feats = Vec::with_capacity(cfg.n * d);
    let mut text_feats = Vec::with_capacity(cfg.n * h);
    let mut target_feats = Vec::with_capacity(cfg.g * d);
    for j in 0..cfg.g {
        let z: Vec<f32> = (0..d).map(|_| gaussian(&mut rng) as f32).collect();
        let concept = rng.random_range(0..cfg.num_text_concepts);
        if j < cfg.n {
            text_feats.extend(
                codes[concept]
                    .iter()
                    .map(|&c| (c + TEXT_NOISE * gaussian(&mut rng)) as f32),
            );
            query_feats.extend_from_slice(&z);
        }
        let y = truth.apply(&z, concept);
        target_feats.extend(
            y.into_iter()
                .map(|v| (v as f64 + cfg.noise_sigma * gaussian(&mut rng)) as f32),
        );
        truth.concepts.push(concept);
    }
    let ds = FeatureDataset {
        n: cfg.n,
        g: cfg.g,
        d,
        h,
        query_feats,
        text_feats,
        target_feats,
        target_index: (0..cfg.n).collect(),
        target_group: (0..cfg.n as u64).collect(),
        base_loss: Some(BaseLoss::Smax),
    };
    ds.validate()?;
    Ok((ds, truth))
}

// ---------------------------------------------------------------------------
// batches

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub sample_indices: Vec<usize>,
    /// `m` gallery indices per sample, none in the sample's target group.
    pub negative_indices: Vec<Vec<usize>>,
    /// `m` sample indices per sample whose query features serve as
    /// negatives for the triplet form of the symmetry loss; none share the
    /// sample's target group. Empty when not drawn.
    pub query_negatives: Vec<Vec<usize>>,
}

/// Draws `m` distinct gallery indices for each sample, uniformly among the
/// entries outside the sample's target group.
pub fn sample_negatives(
    dataset: &FeatureDataset,
    gallery_groups: &[Option<u64>],
    samples: &[usize],
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    let mut group_sizes: HashMap<u64, usize> = HashMap::new();
    for grp in gallery_groups.iter().flatten() {
        *group_sizes.entry(*grp).or_default() += 1;
    }
    samples
        .iter()
        .map(|&i| {
            let grp = dataset.target_group[i];
            let valid = dataset.g - group_sizes.get(&grp).copied().unwrap_or(0);
            if valid < m {
                return Err(Error::Config(format!(
                    "sample {i} has only {valid} valid negatives, {m} requested"
                )));
            }
            let is_valid = |j: usize| gallery_groups[j] != Some(grp);
            if valid * 4 >= dataset.g {
                // rejection sampling, uniform over the remaining valid entries
                let mut picked = Vec::with_capacity(m);
                while picked.len() < m {
                    let j = rng.random_range(0..dataset.g);
                    if is_valid(j) && !picked.contains(&j) {
                        picked.push(j);
                    }
                }
                Ok(picked)
            } else {
                let pool: Vec<usize> = (0..dataset.g).filter(|&j| is_valid(j)).collect();
                Ok(pool.choose_multiple(rng, m).copied().collect())
            }
        })
        .collect()
}

/// Draws `m` distinct sample indices for each sample, uniformly among the
/// samples outside its target group.
pub fn sample_query_negatives(
    dataset: &FeatureDataset,
    samples: &[usize],
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    let mut group_sizes: HashMap<u64, usize> = HashMap::new();
    for &grp in &dataset.target_group {
        *group_sizes.entry(grp).or_default() += 1;
    }
    samples
        .iter()
        .map(|&i| {
            let grp = dataset.target_group[i];
            let valid = dataset.n - group_sizes[&grp];
            if valid < m {
                return Err(Error::Config(format!(
                    "sample {i} has only {valid} valid query negatives, {m} requested"
                )));
            }
            let is_valid = |j: usize| dataset.target_group[j] != grp;
            if valid * 4 >= dataset.n {
                let mut picked = Vec::with_capacity(m);
                while picked.len() < m {
                    let j = rng.random_range(0..dataset.n);
                    if is_valid(j) && !picked.contains(&j) {
                        picked.push(j);
                    }
                }
                Ok(picked)
            } else {
                let pool: Vec<usize> = (0..dataset.n).filter(|&j| is_valid(j)).collect();
                Ok(pool.choose_multiple(rng, m).copied().collect())
            }
        })
        .collect()
}

/// `n_samples` distinct samples, uniformly, each with `m` gallery negatives
/// and `m` query negatives.
pub fn sample_batch(
    dataset: &FeatureDataset,
    n_samples: usize,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    if n_samples == 0 || n_samples > dataset.n {
        return Err(Error::Config(format!(
            "batch size {n_samples} must lie in 1..={}",
            dataset.n
        )));
    }
    let sample_indices: Vec<usize> = rand::seq::index::sample(rng, dataset.n, n_samples).into_vec();
    let groups = dataset.gallery_groups();
    let negative_indices = sample_negatives(dataset, &groups, &sample_indices, m, rng)?;
    let query_negatives = sample_query_negatives(dataset, &sample_indices, m, rng)?;
    Ok(Batch { sample_indices, negative_indices, query_negatives })
}

/// Shuffled sample order for one epoch, split into full batches; the
/// remainder that does not fill a batch is dropped.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks_exact(batch_size).map(|c| c.to_vec()).collect()
}
