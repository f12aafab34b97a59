//! Training objectives: soft-margin triplet, batch softmax, reconstruction,
//! rotational symmetry and their weighted total.
//!
//! Each loss exists as a tape builder (used by training and gradient
//! checks) and as a plain function over slices.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BaseLoss {
    /// Batch softmax over the similarity matrix.
    #[serde(rename = "SMAX")]
    Smax,
    /// Soft-margin triplet with `m` sampled negatives per sample.
    #[serde(rename = "ST")]
    St,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_sym: f32,
    pub lambda_ri: f32,
    pub lambda_rt: f32,
    /// Base loss form; `None` follows the dataset's hint (SMAX when absent).
    pub base: Option<BaseLoss>,
    /// Negatives per training sample for the triplet form.
    pub m: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_sym: 0.1, lambda_ri: 0.01, lambda_rt: 0.01, base: None, m: 3 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_sym", self.lambda_sym),
            ("lambda_ri", self.lambda_ri),
            ("lambda_rt", self.lambda_rt),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("weights.{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.m == 0 {
            return Err(Error::Config("weights.m must be at least 1".into()));
        }
        Ok(())
    }
}

/// The four terms of the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub base: f32,
    pub sym: f32,
    pub ri: f32,
    pub rt: f32,
}

// ---------------------------------------------------------------------------
// tape builders

/// Mean of `softplus(neg - pos)`.
pub fn soft_triplet<T: Scalar>(tape: &mut Tape<T>, pos: Var, neg: Var) -> Result<Var> {
    contract!(
        tape.value(pos).shape() == tape.value(neg).shape(),
        "soft triplet: {:?} positive vs {:?} negative similarities",
        tape.value(pos).shape(),
        tape.value(neg).shape()
    );
    let diff = tape.sub(neg, pos)?;
    let sp = tape.softplus(diff);
    Ok(tape.mean(sp))
}

/// Mean over rows of `-log softmax(row)[i]`, positives on the diagonal.
pub fn batch_softmax<T: Scalar>(tape: &mut Tape<T>, sims: Var) -> Result<Var> {
    let shape = tape.value(sims).shape().to_vec();
    contract!(
        shape.len() == 2 && shape[0] == shape[1],
        "batch softmax needs a square similarity matrix, got {shape:?}"
    );
    let lsm = tape.log_softmax_rows(sims)?;
    let diag = tape.diag(lsm)?;
    let mean = tape.mean(diag);
    Ok(tape.neg(mean))
}

/// Mean over rows of the squared Euclidean distance.
pub fn reconstruction<T: Scalar>(tape: &mut Tape<T>, original: Var, reconstructed: Var) -> Result<Var> {
    contract!(
        tape.value(original).shape() == tape.value(reconstructed).shape(),
        "reconstruction: {:?} vs {:?}",
        tape.value(original).shape(),
        tape.value(reconstructed).shape()
    );
    let rows = tape.value(original).dims2()?.0;
    let diff = tape.sub(original, reconstructed)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    Ok(tape.mul_const(total, T::one() / T::of_f64(rows as f64)))
}

/// `anchors · targetsᵀ`, `[n, n]`.
pub fn similarity_matrix<T: Scalar>(tape: &mut Tape<T>, anchors: Var, targets: Var) -> Result<Var> {
    let t = tape.transpose(targets)?;
    tape.matmul(anchors, t)
}

/// Positive and negative similarities for the triplet form: each anchor row
/// `i` is paired with `positives[i]` and with `negatives[i*m .. (i+1)*m]`.
pub fn triplet_similarities<T: Scalar>(
    tape: &mut Tape<T>,
    anchors: Var,
    positives: Var,
    negatives: Var,
    m: usize,
) -> Result<(Var, Var)> {
    let (n, d) = tape.value(anchors).dims2()?;
    contract!(m > 0, "triplet form needs m >= 1");
    contract!(
        tape.value(positives).shape() == [n, d],
        "positives have shape {:?}, anchors [{n}, {d}]",
        tape.value(positives).shape()
    );
    contract!(
        tape.value(negatives).shape() == [n * m, d],
        "negatives have shape {:?}, expected [{}, {d}]",
        tape.value(negatives).shape(),
        n * m
    );
    let repeat: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, m)).collect();
    let a = tape.gather_rows(anchors, &repeat)?;
    let p = tape.gather_rows(positives, &repeat)?;
    let pos = tape.row_dot(a, p)?;
    let neg = tape.row_dot(a, negatives)?;
    Ok((pos, neg))
}

/// Base loss between composed queries and their targets.
pub fn base_loss<T: Scalar>(
    tape: &mut Tape<T>,
    base: BaseLoss,
    composed: Var,
    targets: Var,
    negatives: Option<Var>,
    m: usize,
) -> Result<Var> {
    match base {
        BaseLoss::Smax => {
            let sims = similarity_matrix(tape, composed, targets)?;
            batch_softmax(tape, sims)
        }
        BaseLoss::St => {
            let negatives = negatives
                .ok_or_else(|| Error::Contract("triplet base loss needs negatives".into()))?;
            let (pos, neg) = triplet_similarities(tape, composed, targets, negatives, m)?;
            soft_triplet(tape, pos, neg)
        }
    }
}

/// Symmetry loss: conjugate compositions `[n, d]` against the query image
/// features `[n, d]`. Same form as the base loss with the roles of
/// composed/target taken by conjugate/query.
pub fn rotational_symmetry<T: Scalar>(
    tape: &mut Tape<T>,
    base: BaseLoss,
    conjugate: Var,
    queries: Var,
    negatives: Option<Var>,
    m: usize,
) -> Result<Var> {
    base_loss(tape, base, conjugate, queries, negatives, m)
}

/// `base + λ_sym·sym + λ_ri·ri + λ_rt·rt`; absent terms count as zero.
pub fn total<T: Scalar>(
    tape: &mut Tape<T>,
    weights: &LossWeights,
    base: Var,
    sym: Option<Var>,
    ri: Option<Var>,
    rt: Option<Var>,
) -> Result<Var> {
    let mut acc = base;
    for (term, w) in [(sym, weights.lambda_sym), (ri, weights.lambda_ri), (rt, weights.lambda_rt)] {
        if let Some(v) = term {
            let scaled = tape.mul_const(v, T::of_f32(w));
            acc = tape.add(acc, scaled)?;
        }
    }
    Ok(acc)
}

// ---------------------------------------------------------------------------
// plain functions

fn run<F>(build: F) -> Result<f32>
where
    F: FnOnce(&mut Tape<f32>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = build(&mut tape)?;
    Ok(tape.value(out).data()[0])
}

fn matrix(rows: &[Vec<f32>], what: &str) -> Result<Tensor<f32>> {
    contract!(!rows.is_empty(), "{what}: no rows");
    let cols = rows[0].len();
    contract!(cols > 0, "{what}: empty rows");
    contract!(
        rows.iter().all(|r| r.len() == cols),
        "{what}: rows have different lengths"
    );
    Tensor::matrix(rows.len(), cols, rows.concat())
}

fn finite(values: &[f32], what: &str) -> Result<()> {
    contract!(
        values.iter().all(|v| v.is_finite()),
        "{what} contains non-finite values"
    );
    Ok(())
}

/// Soft-margin triplet loss over paired positive/negative similarities.
pub fn soft_triplet_loss(pos_sims: &[f32], neg_sims: &[f32]) -> Result<f32> {
    contract!(
        pos_sims.len() == neg_sims.len(),
        "soft triplet: {} positive vs {} negative similarities",
        pos_sims.len(),
        neg_sims.len()
    );
    contract!(!pos_sims.is_empty(), "soft triplet: no similarities");
    finite(pos_sims, "positive similarities")?;
    finite(neg_sims, "negative similarities")?;
    run(|t| {
        let p = t.constant(Tensor::vector(pos_sims.to_vec()));
        let n = t.constant(Tensor::vector(neg_sims.to_vec()));
        soft_triplet(t, p, n)
    })
}

/// Batch softmax loss of an `N x N` similarity matrix given as rows.
pub fn batch_softmax_loss(sims: &[Vec<f32>]) -> Result<f32> {
    let m = matrix(sims, "similarity matrix")?;
    finite(m.data(), "similarity matrix")?;
    run(|t| {
        let s = t.constant(m);
        batch_softmax(t, s)
    })
}

/// Mean squared Euclidean distance between paired rows.
pub fn reconstruction_loss(original: &[Vec<f32>], reconstructed: &[Vec<f32>]) -> Result<f32> {
    contract!(
        original.len() == reconstructed.len(),
        "reconstruction: {} vs {} samples",
        original.len(),
        reconstructed.len()
    );
    for (i, (a, b)) in original.iter().zip(reconstructed).enumerate() {
        contract!(
            a.len() == b.len(),
            "reconstruction: sample {i} has lengths {} and {}",
            a.len(),
            b.len()
        );
    }
    let a = matrix(original, "original")?;
    let b = matrix(reconstructed, "reconstructed")?;
    run(|t| {
        let a = t.constant(a);
        let b = t.constant(b);
        reconstruction(t, a, b)
    })
}

/// Symmetry loss from conjugate compositions and query features.
/// `negatives[i]` holds the `m` negative query features of sample `i` and is
/// required for the triplet form only.
pub fn rotational_symmetry_loss(
    conjugate: &[Vec<f32>],
    queries: &[Vec<f32>],
    base: BaseLoss,
    negatives: Option<&[Vec<Vec<f32>>]>,
) -> Result<f32> {
    contract!(
        conjugate.len() == queries.len(),
        "symmetry loss: {} conjugate rows vs {} queries",
        conjugate.len(),
        queries.len()
    );
    let c = matrix(conjugate, "conjugate compositions")?;
    let q = matrix(queries, "query features")?;
    contract!(c.shape() == q.shape(), "symmetry loss: {:?} vs {:?}", c.shape(), q.shape());
    let (negs, m) = match (base, negatives) {
        (BaseLoss::Smax, _) => (None, 1),
        (BaseLoss::St, None) => {
            return Err(Error::Contract("triplet symmetry loss needs negatives".into()))
        }
        (BaseLoss::St, Some(n)) => {
            contract!(n.len() == conjugate.len(), "one negative list per sample is required");
            let m = n[0].len();
            contract!(m > 0 && n.iter().all(|l| l.len() == m), "negative lists differ in length");
            let flat: Vec<Vec<f32>> = n.iter().flatten().cloned().collect();
            (Some(matrix(&flat, "negatives")?), m)
        }
    };
    run(|t| {
        let c = t.constant(c);
        let q = t.constant(q);
        let n = negs.map(|n| t.constant(n));
        rotational_symmetry(t, base, c, q, n, m)
    })
}

/// Weighted total; a non-finite component is reported by name.
pub fn total_loss(components: LossComponents, weights: &LossWeights) -> Result<f32> {
    for (name, v) in [
        ("base", components.base),
        ("sym", components.sym),
        ("ri", components.ri),
        ("rt", components.rt),
    ] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss component {name} is {v}")));
        }
    }
    Ok(components.base
        + weights.lambda_sym * components.sym
        + weights.lambda_ri * components.ri
        + weights.lambda_rt * components.rt)
}
