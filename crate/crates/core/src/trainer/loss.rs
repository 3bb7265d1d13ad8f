//! InfoNCE with in-batch negatives and its analytic gradient.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::examples::TrainingExample;
use crate::dataset::Corpus;
use crate::embedder::{EmbedderModel, FeatureVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub loss: f64,
    pub gradient_norm: f64,
}

/// Loss over a score matrix plus its derivative with respect to the raw scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreLoss {
    pub loss: f64,
    pub per_example: Vec<f64>,
    /// `d loss / d scores[i][j]`, already divided by the temperature.
    pub grad_scores: Vec<Vec<f64>>,
}

/// Mean over rows of `-log softmax(scores[i] / tau)[positives[i]]`.
pub fn infonce_from_scores(
    scores: &[Vec<f64>],
    positives: &[usize],
    tau: f64,
) -> Result<ScoreLoss> {
    if scores.len() != positives.len() {
        return Err(Error::LengthMismatch(scores.len(), positives.len()));
    }
    if scores.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let n = scores.len() as f64;
    let mut per_example = Vec::with_capacity(scores.len());
    let mut grad_scores = Vec::with_capacity(scores.len());
    for (i, (row, &pos)) in scores.iter().zip(positives).enumerate() {
        if pos >= row.len() {
            return Err(Error::InvalidInput(format!(
                "positive index {pos} out of range for row {i} of width {}",
                row.len()
            )));
        }
        let z: Vec<f64> = row.iter().map(|s| s / tau).collect();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let loss = max + sum.ln() - z[pos];
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss for example {i}")));
        }
        per_example.push(loss);
        grad_scores.push(
            exps.iter()
                .enumerate()
                .map(|(j, e)| {
                    let target = if j == pos { 1.0 } else { 0.0 };
                    (e / sum - target) / (n * tau)
                })
                .collect(),
        );
    }
    let loss = per_example.iter().sum::<f64>() / n;
    Ok(ScoreLoss {
        loss,
        per_example,
        grad_scores,
    })
}

/// Featurized batch. Candidates are the `n` positives followed by the `n`
/// negatives, so query `i` has its positive at column `i`.
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    pub queries: Vec<FeatureVector>,
    pub candidates: Vec<FeatureVector>,
}

impl EncodedBatch {
    pub fn new(model: &EmbedderModel, corpus: &Corpus, batch: &[TrainingExample]) -> Result<Self> {
        let queries = batch
            .iter()
            .map(|ex| model.featurize(&ex.input_text))
            .collect();
        let mut candidates = Vec::with_capacity(2 * batch.len());
        for id in batch
            .iter()
            .map(|ex| &ex.positive_doc_id)
            .chain(batch.iter().map(|ex| &ex.negative_doc_id))
        {
            candidates.push(model.featurize(&corpus.require(id)?.full_text()));
        }
        Ok(Self {
            queries,
            candidates,
        })
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn positives(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }
}

/// Projection, its norm and the normalized embedding for one text.
struct Encoded {
    e: Vec<f64>,
    norm: f64,
}

fn encode(model: &EmbedderModel, x: &FeatureVector) -> Result<Encoded> {
    let mut u = model.project(x);
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite("embedding norm".into()));
    }
    if norm > 0.0 {
        u.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(Encoded { e: u, norm })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn score_matrix(qs: &[Encoded], cs: &[Encoded]) -> Vec<Vec<f64>> {
    qs.iter()
        .map(|q| cs.iter().map(|c| dot(&q.e, &c.e)).collect())
        .collect()
}

pub fn batch_loss(model: &EmbedderModel, batch: &EncodedBatch, tau: f64) -> Result<f64> {
    let qs = batch
        .queries
        .iter()
        .map(|x| encode(model, x))
        .collect::<Result<Vec<_>>>()?;
    let cs = batch
        .candidates
        .iter()
        .map(|x| encode(model, x))
        .collect::<Result<Vec<_>>>()?;
    Ok(infonce_from_scores(&score_matrix(&qs, &cs), &batch.positives(), tau)?.loss)
}

/// Gradient with respect to `W`, stored only for feature columns that occur
/// in the batch. Untouched columns have zero gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGradient {
    d_out: usize,
    n_features: usize,
    columns: BTreeMap<usize, Vec<f64>>,
}

impl SparseGradient {
    pub fn new(d_out: usize, n_features: usize) -> Self {
        Self {
            d_out,
            n_features,
            columns: BTreeMap::new(),
        }
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn add(&mut self, row: usize, col: usize, g: f64) {
        let d_out = self.d_out;
        self.columns.entry(col).or_insert_with(|| vec![0.0; d_out])[row] += g;
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.columns.get(&col).map_or(0.0, |c| c[row])
    }

    /// Touched columns in ascending order, each as a `d_out` vector.
    pub fn columns(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.columns.iter().map(|(c, v)| (*c, v.as_slice()))
    }

    pub fn norm(&self) -> f64 {
        self.columns
            .values()
            .flat_map(|c| c.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Row-major `d_out x n_features`, same layout as the model weights.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.d_out * self.n_features];
        for (&c, col) in &self.columns {
            for (r, g) in col.iter().enumerate() {
                out[r * self.n_features + c] = *g;
            }
        }
        out
    }

    fn add_outer(&mut self, g_u: &[f64], x: &FeatureVector) {
        let d_out = self.d_out;
        for (c, v) in x.iter() {
            let col = self.columns.entry(c).or_insert_with(|| vec![0.0; d_out]);
            for (slot, g) in col.iter_mut().zip(g_u) {
                *slot += g * v;
            }
        }
    }
}

/// Backpropagates `g_e = d loss / d e` through `e = u / |u|` and `u = W x`.
fn backprop(grad: &mut SparseGradient, enc: &Encoded, g_e: &[f64], x: &FeatureVector) {
    if enc.norm == 0.0 {
        return;
    }
    let proj = dot(g_e, &enc.e);
    let g_u: Vec<f64> = g_e
        .iter()
        .zip(&enc.e)
        .map(|(g, e)| (g - proj * e) / enc.norm)
        .collect();
    grad.add_outer(&g_u, x);
}

pub fn batch_loss_and_gradient(
    model: &EmbedderModel,
    batch: &EncodedBatch,
    tau: f64,
) -> Result<(f64, SparseGradient)> {
    let qs = batch
        .queries
        .iter()
        .map(|x| encode(model, x))
        .collect::<Result<Vec<_>>>()?;
    let cs = batch
        .candidates
        .iter()
        .map(|x| encode(model, x))
        .collect::<Result<Vec<_>>>()?;
    let sl = infonce_from_scores(&score_matrix(&qs, &cs), &batch.positives(), tau)?;
    let d = model.d_out();
    let mut grad = SparseGradient::new(d, model.n_features());

    for (i, q) in qs.iter().enumerate() {
        let mut g_e = vec![0.0; d];
        for (j, c) in cs.iter().enumerate() {
            let w = sl.grad_scores[i][j];
            g_e.iter_mut().zip(&c.e).for_each(|(g, e)| *g += w * e);
        }
        backprop(&mut grad, q, &g_e, &batch.queries[i]);
    }
    for (j, c) in cs.iter().enumerate() {
        let mut g_e = vec![0.0; d];
        for (i, q) in qs.iter().enumerate() {
            let w = sl.grad_scores[i][j];
            g_e.iter_mut().zip(&q.e).for_each(|(g, e)| *g += w * e);
        }
        backprop(&mut grad, c, &g_e, &batch.candidates[j]);
    }
    Ok((sl.loss, grad))
}

pub fn infonce_loss(
    model: &EmbedderModel,
    corpus: &Corpus,
    batch: &[TrainingExample],
    tau: f64,
) -> Result<LossReport> {
    let enc = EncodedBatch::new(model, corpus, batch)?;
    let (loss, grad) = batch_loss_and_gradient(model, &enc, tau)?;
    Ok(LossReport {
        step: 0,
        loss,
        gradient_norm: grad.norm(),
    })
}

pub fn infonce_gradient(
    model: &EmbedderModel,
    corpus: &Corpus,
    batch: &[TrainingExample],
    tau: f64,
) -> Result<SparseGradient> {
    let enc = EncodedBatch::new(model, corpus, batch)?;
    Ok(batch_loss_and_gradient(model, &enc, tau)?.1)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central finite difference of the batch loss with respect to `W[row, col]`.
pub fn finite_difference(
    model: &mut EmbedderModel,
    batch: &EncodedBatch,
    tau: f64,
    row: usize,
    col: usize,
    eps: f64,
) -> Result<f64> {
    let idx = model.param_index(row, col);
    let orig = model.params()[idx];
    model.params_mut()[idx] = orig + eps;
    let plus = batch_loss(model, batch, tau);
    model.params_mut()[idx] = orig - eps;
    let minus = batch_loss(model, batch, tau);
    model.params_mut()[idx] = orig;
    Ok((plus? - minus?) / (2.0 * eps))
}
