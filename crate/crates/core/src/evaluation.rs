//! Dot-product retrieval and recall@k.

use std::cmp::Ordering;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::composition::Model;
use crate::data::FeatureDataset;
use crate::error::{contract, Error, Result};

/// Queries composed per forward pass during evaluation.
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallAtK {
    pub k: usize,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub recall: Vec<RecallAtK>,
    /// 1-based rank of the best-ranked correct gallery entry per query;
    /// `None` when the query has no correct entry in the gallery.
    pub first_correct_rank: Vec<Option<usize>>,
    pub gallery_size: usize,
    pub num_queries: usize,
    pub elapsed_secs: f64,
    /// Both sides were L2-normalized before scoring.
    pub normalized: bool,
    pub warnings: Vec<String>,
}

impl RetrievalReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|r| r.k == k).map(|r| r.recall)
    }
}

/// Dot product.
pub fn similarity(u: &[f32], v: &[f32]) -> Result<f32> {
    contract!(
        u.len() == v.len(),
        "similarity of vectors with lengths {} and {}",
        u.len(),
        v.len()
    );
    Ok(dot(u, v))
}

fn dot(u: &[f32], v: &[f32]) -> f32 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Descending score, then ascending index.
fn rank_order(scores: &[f32], a: usize, b: usize) -> Ordering {
    scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

fn scores(query: &[f32], gallery: &[f32]) -> Vec<f32> {
    gallery.chunks(query.len()).map(|row| dot(query, row)).collect()
}

/// Gallery indices (`gallery` is `g x d`, row-major) sorted by descending
/// similarity to `query`, ties broken by ascending index.
pub fn rank_gallery(query: &[f32], gallery: &[f32]) -> Result<Vec<usize>> {
    contract!(!query.is_empty(), "empty query embedding");
    contract!(!gallery.is_empty(), "empty gallery");
    contract!(
        gallery.len().is_multiple_of(query.len()),
        "gallery of {} floats does not hold rows of width {}",
        gallery.len(),
        query.len()
    );
    let s = scores(query, gallery);
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| rank_order(&s, a, b));
    Ok(order)
}

fn l2_normalize_rows(data: &[f32], width: usize) -> Vec<f32> {
    data.chunks(width)
        .flat_map(|row| {
            let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            let inv = if norm > 0.0 { 1.0 / norm } else { 0.0 };
            row.iter().map(move |v| v * inv)
        })
        .collect()
}

/// Recall@k of precomputed query embeddings (`n x d`, one row per dataset
/// sample) against the dataset's gallery. A gallery entry is correct for a
/// query when it belongs to the query's target group.
pub fn recall_at_k(
    embeddings: &[f32],
    dataset: &FeatureDataset,
    ks: &[usize],
    normalize: bool,
) -> Result<RetrievalReport> {
    let start = Instant::now();
    let d = dataset.d;
    contract!(
        embeddings.len() == dataset.n * d,
        "{} embedding values for {} queries of width {d}",
        embeddings.len(),
        dataset.n
    );
    contract!(!ks.is_empty(), "no cutoffs requested");
    contract!(
        ks.iter().all(|&k| k >= 1) && ks.windows(2).all(|w| w[0] < w[1]),
        "cutoffs must be >= 1 and strictly ascending, got {ks:?}"
    );
    let mut warnings = Vec::new();
    let clamped: Vec<usize> = ks.iter().map(|&k| k.min(dataset.g)).collect();
    if ks.iter().any(|&k| k > dataset.g) {
        warnings.push(format!(
            "cutoffs above the gallery size {} were clamped to it",
            dataset.g
        ));
    }

    let (queries, gallery) = if normalize {
        (l2_normalize_rows(embeddings, d), l2_normalize_rows(&dataset.target_feats, d))
    } else {
        (embeddings.to_vec(), dataset.target_feats.clone())
    };
    let groups = dataset.gallery_groups();
    let mut first_correct_rank = Vec::with_capacity(dataset.n);
    for (i, query) in queries.chunks(d).enumerate() {
        let s = scores(query, &gallery);
        let grp = dataset.target_group[i];
        let best = (0..dataset.g)
            .filter(|&j| groups[j] == Some(grp))
            .min_by(|&a, &b| rank_order(&s, a, b));
        first_correct_rank.push(best.map(|c| {
            1 + (0..dataset.g)
                .filter(|&j| rank_order(&s, j, c) == Ordering::Less)
                .count()
        }));
    }

    let recall = ks
        .iter()
        .zip(&clamped)
        .map(|(&k, &kc)| {
            let hits = first_correct_rank
                .iter()
                .filter(|r| r.is_some_and(|r| r <= kc))
                .count();
            RecallAtK { k, recall: hits as f64 / dataset.n as f64 }
        })
        .collect();
    Ok(RetrievalReport {
        recall,
        first_correct_rank,
        gallery_size: dataset.g,
        num_queries: dataset.n,
        elapsed_secs: start.elapsed().as_secs_f64(),
        normalized: normalize,
        warnings,
    })
}

/// Composed embeddings for every sample of `dataset`.
pub fn compose_all(model: &Model, dataset: &FeatureDataset) -> Result<Vec<f32>> {
    let cfg = &model.config;
    if cfg.d != dataset.d || cfg.h != dataset.h {
        return Err(Error::Config(format!(
            "model expects d = {}, h = {} but the dataset has d = {}, h = {}",
            cfg.d, cfg.h, dataset.d, dataset.h
        )));
    }
    let mut out = Vec::with_capacity(dataset.n * cfg.d);
    for start in (0..dataset.n).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(dataset.n);
        let z = &dataset.query_feats[start * cfg.d..end * cfg.d];
        let q = &dataset.text_feats[start * cfg.h..end * cfg.h];
        out.extend(model.compose_batch(z, q)?);
    }
    Ok(out)
}

/// Composes every query with `model` and ranks it against the full gallery.
pub fn evaluate(
    model: &Model,
    dataset: &FeatureDataset,
    ks: &[usize],
    normalize: bool,
) -> Result<RetrievalReport> {
    let start = Instant::now();
    let embeddings = compose_all(model, dataset)?;
    let mut report = recall_at_k(&embeddings, dataset, ks, normalize)?;
    report.elapsed_secs = start.elapsed().as_secs_f64();
    Ok(report)
}
