//! Contrastive fine-tuning of the linear embedder.

mod examples;
mod loss;
mod optim;

pub use examples::{
    build_initial_examples, build_subsequent_examples, read_examples, write_examples, ContextBound,
    GeneratedExamples, TrainingExample,
};
pub use loss::{
    batch_loss, batch_loss_and_gradient, finite_difference, infonce_from_scores, infonce_gradient,
    infonce_loss, relative_error, EncodedBatch, LossReport, ScoreLoss, SparseGradient,
};
pub use optim::{warmup_lr, AdamW, AdamWParams};

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Corpus;
use crate::embedder::{EmbedderModel, FeatureVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub temperature: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Loss-curve granularity; each point is the mean over its interval.
    pub log_every: usize,
    /// Finite-difference check cadence in steps; 0 disables it.
    pub grad_check_every: usize,
    pub grad_check_coords: usize,
    pub grad_check_tolerance: f64,
    pub divergence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamWParams::default();
        Self {
            temperature: 0.05,
            learning_rate: 1e-4,
            batch_size: 16,
            warmup_steps: 1000,
            total_steps: 5000,
            seed: 0,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            weight_decay: adam.weight_decay,
            log_every: 100,
            grad_check_every: 0,
            grad_check_coords: 8,
            grad_check_tolerance: 1e-3,
            divergence_threshold: 1e6,
        }
    }
}

impl TrainConfig {
    /// Full-scale setting: batch 48 for 50k steps.
    pub fn reference() -> Self {
        Self {
            batch_size: 48,
            total_steps: 50_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("train.{field}: {msg}")));
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(
                "temperature",
                format!("must be positive, got {}", self.temperature),
            );
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(
                "learning_rate",
                format!("must be non-negative, got {}", self.learning_rate),
            );
        }
        if self.batch_size < 2 {
            return bad(
                "batch_size",
                format!("must be at least 2, got {}", self.batch_size),
            );
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1/beta2", "must lie in [0, 1)".into());
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad("epsilon", "must be positive".into());
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay", "must be non-negative".into());
        }
        if self.log_every == 0 {
            return bad("log_every", "must be at least 1".into());
        }
        Ok(())
    }

    fn adam(&self) -> AdamWParams {
        AdamWParams {
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: EmbedderModel,
    pub curve: Vec<LossReport>,
    pub steps: usize,
}

/// Yields batches of example indices from successive seeded shuffles,
/// dropping each epoch's incomplete tail.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    size: usize,
}

impl Batcher {
    fn new(n: usize, size: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            size: size.min(n),
        }
    }

    fn next<R: Rng>(&mut self, rng: &mut R) -> &[usize] {
        if self.pos + self.size > self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let batch = &self.order[self.pos..self.pos + self.size];
        self.pos += self.size;
        batch
    }
}

/// Trains a copy of `init` on `examples` and returns it with its loss curve.
pub fn train_embedder(
    init: &EmbedderModel,
    corpus: &Corpus,
    examples: &[TrainingExample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if examples.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 training examples, got {}",
            examples.len()
        )));
    }
    let mut model = init.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // Separate stream so enabling the check does not change the batches.
    let mut check_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);

    // Featurize each distinct text once.
    let query_feats: Vec<FeatureVector> = examples
        .iter()
        .map(|ex| model.featurize(&ex.input_text))
        .collect();
    let mut doc_feats: HashMap<&str, FeatureVector> = HashMap::new();
    for ex in examples {
        for id in [&ex.positive_doc_id, &ex.negative_doc_id] {
            if !doc_feats.contains_key(id.as_str()) {
                let doc = corpus.require(id)?;
                doc_feats.insert(id.as_str(), model.featurize(&doc.full_text()));
            }
        }
    }

    let mut opt = AdamW::new(model.params().len(), config.adam());
    let mut batcher = Batcher::new(examples.len(), config.batch_size);
    let mut curve = Vec::new();
    let (mut acc_loss, mut acc_grad, mut acc_n) = (0.0, 0.0, 0usize);

    for step in 0..config.total_steps {
        let idx = batcher.next(&mut rng);
        let batch = EncodedBatch {
            queries: idx.iter().map(|&i| query_feats[i].clone()).collect(),
            candidates: idx
                .iter()
                .map(|&i| doc_feats[examples[i].positive_doc_id.as_str()].clone())
                .chain(
                    idx.iter()
                        .map(|&i| doc_feats[examples[i].negative_doc_id.as_str()].clone()),
                )
                .collect(),
        };
        let (loss, grad) = match batch_loss_and_gradient(&model, &batch, config.temperature) {
            Ok(v) => v,
            Err(Error::NonFinite(_)) => {
                return Err(Error::Diverged {
                    step,
                    loss: f64::NAN,
                })
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || loss > config.divergence_threshold {
            return Err(Error::Diverged { step, loss });
        }
        if config.grad_check_every > 0 && step % config.grad_check_every == 0 {
            check_gradient(&mut model, &batch, &grad, config, step, &mut check_rng)?;
        }
        let lr = warmup_lr(config.learning_rate, config.warmup_steps, step);
        opt.step(model.params_mut(), &grad, lr);

        acc_loss += loss;
        acc_grad += grad.norm();
        acc_n += 1;
        if step % config.log_every == 0 || step + 1 == config.total_steps {
            let report = LossReport {
                step,
                loss: acc_loss / acc_n as f64,
                gradient_norm: acc_grad / acc_n as f64,
            };
            log::info!("step {step}: loss {:.4}", report.loss);
            curve.push(report);
            (acc_loss, acc_grad, acc_n) = (0.0, 0.0, 0);
        }
    }
    if let Some(pos) = model.params().iter().position(|w| !w.is_finite()) {
        return Err(Error::NonFinite(format!(
            "trained weight at flat index {pos}"
        )));
    }
    Ok(TrainOutcome {
        model,
        curve,
        steps: config.total_steps,
    })
}

fn check_gradient<R: Rng>(
    model: &mut EmbedderModel,
    batch: &EncodedBatch,
    grad: &SparseGradient,
    config: &TrainConfig,
    step: usize,
    rng: &mut R,
) -> Result<()> {
    let cols: Vec<usize> = grad.columns().map(|(c, _)| c).collect();
    if cols.is_empty() {
        return Ok(());
    }
    for _ in 0..config.grad_check_coords {
        let col = cols[rng.random_range(0..cols.len())];
        let row = rng.random_range(0..model.d_out());
        let numeric = finite_difference(model, batch, config.temperature, row, col, 1e-5)?;
        let rel = relative_error(grad.get(row, col), numeric, 1e-8);
        if rel > config.grad_check_tolerance {
            return Err(Error::GradientCheck {
                step,
                row,
                col,
                rel_error: rel,
            });
        }
    }
    Ok(())
}

/// `step,loss,grad_norm` rows.
pub fn loss_curve_csv(curve: &[LossReport]) -> String {
    let mut out = String::from("step,loss,grad_norm\n");
    for r in curve {
        out.push_str(&format!("{},{},{}\n", r.step, r.loss, r.gradient_norm));
    }
    out
}

pub fn write_loss_curve(curve: &[LossReport], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, loss_curve_csv(curve)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batcher_covers_each_epoch_without_repeats() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = Batcher::new(10, 3);
        let mut seen: Vec<usize> = (0..3).flat_map(|_| b.next(&mut rng).to_vec()).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9);
    }

    #[test]
    fn small_example_sets_shrink_the_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = Batcher::new(5, 16);
        assert_eq!(b.next(&mut rng).len(), 5);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig::reference().validate().is_ok());
        let c = TrainConfig {
            temperature: 0.0,
            ..Default::default()
        };
        assert!(c
            .validate()
            .unwrap_err()
            .to_string()
            .contains("train.temperature"));
        let c = TrainConfig {
            batch_size: 1,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
