//! Contrastive training. The projection is lifted to f64 for the whole
//! run (the published model quantizes back to f32), gradients flow through
//! the L2 normalization on both tower outputs, and the optimizer keeps
//! adaptive per-parameter moments with decoupled weight decay, updating
//! only the hash columns touched by each batch.

use super::{featurize, EncoderModel, FeaturizerConfig, TrainPair};
use crate::rng::SplitMix64;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub margin: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 5000,
            batch_size: 32,
            grad_accum: 1,
            peak_lr: 1e-3,
            weight_decay: 0.01,
            warmup_steps: 500,
            margin: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Learning rate sized for fine-tuning a pretrained transformer
    /// rather than training the hashed projection from scratch.
    pub fn fine_tune() -> Self {
        Self {
            peak_lr: 5e-5,
            ..Self::default()
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("schedule step {step} outside [0, {total_steps}]")]
pub struct ScheduleError {
    pub step: usize,
    pub total_steps: usize,
}

/// Learning rate at a step: linear from 0 to the peak over the warmup,
/// then cosine decay to 0 at `total_steps`. With `warmup_steps ==
/// total_steps` the rate holds at the peak and never decays.
pub fn lr_at(config: &TrainConfig, step: usize) -> Result<f64, ScheduleError> {
    if step > config.total_steps {
        return Err(ScheduleError {
            step,
            total_steps: config.total_steps,
        });
    }
    if step < config.warmup_steps {
        return Ok(config.peak_lr * step as f64 / config.warmup_steps as f64);
    }
    let decay_span = config.total_steps - config.warmup_steps;
    if decay_span == 0 {
        return Ok(config.peak_lr);
    }
    let progress = (step - config.warmup_steps) as f64 / decay_span as f64;
    Ok(config.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("bad train config: {0}")]
    Config(String),
    #[error("non-finite loss {loss} at step {step}")]
    NonFinite { step: usize, loss: f64 },
}

type Feats = [(u32, f64)];

/// The encoder with 64-bit weights, used during training and by the
/// finite-difference gradient oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoderF64 {
    pub featurizer: FeaturizerConfig,
    pub embed_dim: usize,
    /// Row-major `embed_dim x hash_dim`.
    pub weights: Vec<f64>,
}

/// One tower's forward pass.
struct Tower {
    unit: Vec<f64>,
    norm: f64,
    /// A zero-feature (or zero-norm) input embeds as a constant basis
    /// vector and contributes no gradient.
    degenerate: bool,
}

impl DualEncoderF64 {
    pub fn from_model(model: &EncoderModel) -> Self {
        Self {
            featurizer: model.featurizer,
            embed_dim: model.embed_dim,
            weights: model.weights.iter().map(|w| f64::from(*w)).collect(),
        }
    }

    pub fn to_model(&self) -> EncoderModel {
        EncoderModel {
            featurizer: self.featurizer,
            embed_dim: self.embed_dim,
            weights: self.weights.iter().map(|w| *w as f32).collect(),
        }
    }

    pub fn embed(&self, text: &str) -> Vec<f64> {
        self.forward(&featurize(&self.featurizer, text)).unit
    }

    fn forward(&self, features: &Feats) -> Tower {
        let hash_dim = self.featurizer.hash_dim as usize;
        let mut projected = vec![0.0f64; self.embed_dim];
        for &(bucket, weight) in features {
            let bucket = bucket as usize;
            for (row, out) in projected.iter_mut().enumerate() {
                *out += weight * self.weights[row * hash_dim + bucket];
            }
        }
        let norm = projected.iter().map(|x| x * x).sum::<f64>().sqrt();
        if features.is_empty() || norm < 1e-12 {
            let mut unit = vec![0.0f64; self.embed_dim];
            if let Some(first) = unit.first_mut() {
                *first = 1.0;
            }
            return Tower {
                unit,
                norm: 1.0,
                degenerate: true,
            };
        }
        Tower {
            unit: projected.iter().map(|x| x / norm).collect(),
            norm,
            degenerate: false,
        }
    }

    /// Mean contrastive loss over a batch of text pairs.
    pub fn batch_loss(&self, batch: &[TrainPair], margin: f64) -> f64 {
        let featurized = self.featurize_batch(batch);
        self.batch_loss_refs(&as_refs(&featurized), margin)
    }

    /// Mean loss plus its gradient with respect to the projection, as a
    /// map from touched hash column to the full column gradient.
    pub fn batch_gradient(
        &self,
        batch: &[TrainPair],
        margin: f64,
    ) -> (f64, BTreeMap<u32, Vec<f64>>) {
        let featurized = self.featurize_batch(batch);
        self.batch_gradient_refs(&as_refs(&featurized), margin)
    }

    fn featurize_batch(&self, batch: &[TrainPair]) -> Vec<(Vec<(u32, f64)>, Vec<(u32, f64)>, bool)> {
        batch
            .iter()
            .map(|pair| {
                (
                    featurize(&self.featurizer, &pair.query),
                    featurize(&self.featurizer, &pair.document),
                    pair.positive,
                )
            })
            .collect()
    }

    fn batch_loss_refs(&self, batch: &[(&Feats, &Feats, bool)], margin: f64) -> f64 {
        if batch.is_empty() {
            return 0.0;
        }
        let total: f64 = batch
            .iter()
            .map(|&(q, d, positive)| {
                let q = self.forward(q);
                let d = self.forward(d);
                pair_terms(&q, &d, positive, margin).loss
            })
            .sum();
        total / batch.len() as f64
    }

    fn batch_gradient_refs(
        &self,
        batch: &[(&Feats, &Feats, bool)],
        margin: f64,
    ) -> (f64, BTreeMap<u32, Vec<f64>>) {
        let mut grads: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        if batch.is_empty() {
            return (0.0, grads);
        }
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for &(query, document, positive) in batch {
            let q = self.forward(query);
            let d = self.forward(document);
            let terms = pair_terms(&q, &d, positive, margin);
            total += terms.loss;
            if let Some(ds) = terms.dloss_dsim {
                accumulate_side(&mut grads, self.embed_dim, &q, &d, ds * scale, query);
                accumulate_side(&mut grads, self.embed_dim, &d, &q, ds * scale, document);
            }
        }
        (total * scale, grads)
    }
}

fn as_refs(owned: &[(Vec<(u32, f64)>, Vec<(u32, f64)>, bool)]) -> Vec<(&Feats, &Feats, bool)> {
    owned
        .iter()
        .map(|(q, d, positive)| (q.as_slice(), d.as_slice(), *positive))
        .collect()
}

struct PairTerms {
    loss: f64,
    /// dL/d(cosine similarity); None when the pair sits at a flat spot of
    /// the loss and contributes no gradient.
    dloss_dsim: Option<f64>,
}

/// Loss and its derivative with respect to the unit-vector dot product.
/// Positives: L = d^2 = 2 - 2s, so dL/ds = -2. Negatives inside the margin:
/// L = (m - d)^2 with d = sqrt(2 - 2s), so dL/ds = 2(m - d)/d.
fn pair_terms(q: &Tower, d: &Tower, positive: bool, margin: f64) -> PairTerms {
    let sim: f64 = q.unit.iter().zip(&d.unit).map(|(a, b)| a * b).sum();
    // Clamp at zero without using max(), which would swallow a NaN from
    // diverged weights; the step loss must go non-finite so training stops.
    let gap = 2.0 - 2.0 * sim;
    let gap = if gap < 0.0 { 0.0 } else { gap };
    if positive {
        return PairTerms {
            loss: gap,
            dloss_dsim: Some(-2.0),
        };
    }
    let distance = gap.sqrt();
    if distance >= margin {
        return PairTerms {
            loss: 0.0,
            dloss_dsim: None,
        };
    }
    let shortfall = margin - distance;
    PairTerms {
        loss: shortfall * shortfall,
        dloss_dsim: Some(2.0 * shortfall / distance.max(1e-9)),
    }
}

/// Backpropagate one tower: dL/dv = dloss_dsim * other_unit, projected
/// through the normalization (I - v v^T)/norm, then spread over the
/// tower's feature columns.
fn accumulate_side(
    grads: &mut BTreeMap<u32, Vec<f64>>,
    embed_dim: usize,
    side: &Tower,
    other: &Tower,
    dloss_dsim: f64,
    features: &Feats,
) {
    if side.degenerate {
        return;
    }
    let radial: f64 = side
        .unit
        .iter()
        .zip(&other.unit)
        .map(|(a, b)| a * b)
        .sum::<f64>()
        * dloss_dsim;
    let dl_du: Vec<f64> = side
        .unit
        .iter()
        .zip(&other.unit)
        .map(|(v, o)| (dloss_dsim * o - radial * v) / side.norm)
        .collect();
    for &(bucket, weight) in features {
        let column = grads
            .entry(bucket)
            .or_insert_with(|| vec![0.0f64; embed_dim]);
        for (slot, g) in column.iter_mut().zip(&dl_du) {
            *slot += g * weight;
        }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Train a model: `total_steps` mini-batch updates over the pair list,
/// reshuffled each epoch with seeds derived from the config seed. Both
/// text sides share the one projection. Returns the trained model and the
/// per-step mean batch loss.
pub fn train(
    model_init: &EncoderModel,
    pairs: &[TrainPair],
    config: &TrainConfig,
) -> Result<(EncoderModel, Vec<f64>), TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if config.total_steps == 0 || config.batch_size == 0 || config.grad_accum == 0 {
        return Err(TrainError::Config(
            "total_steps, batch_size and grad_accum must be positive".to_string(),
        ));
    }
    if config.warmup_steps > config.total_steps {
        return Err(TrainError::Config(format!(
            "warmup_steps {} exceeds total_steps {}",
            config.warmup_steps, config.total_steps
        )));
    }

    let mut state = DualEncoderF64::from_model(model_init);

    // Texts repeat heavily across pairs (an instruction is shared with its
    // negatives, head elements appear in many pairs); featurize each
    // distinct text once.
    let mut text_ids: BTreeMap<String, usize> = BTreeMap::new();
    let mut features: Vec<Vec<(u32, f64)>> = Vec::new();
    let mut examples: Vec<(usize, usize, bool)> = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let query = intern(&mut text_ids, &mut features, &state.featurizer, &pair.query);
        let document = intern(
            &mut text_ids,
            &mut features,
            &state.featurizer,
            &pair.document,
        );
        examples.push((query, document, pair.positive));
    }
    drop(text_ids);

    let mut first_moment = vec![0.0f64; state.weights.len()];
    let mut second_moment = vec![0.0f64; state.weights.len()];
    let hash_dim = state.featurizer.hash_dim as usize;

    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    let mut epoch = 0usize;
    let mut trace = Vec::with_capacity(config.total_steps);

    for step in 1..=config.total_steps {
        let mut grads: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        let mut step_loss = 0.0;
        for _ in 0..config.grad_accum {
            let mut batch: Vec<(&Feats, &Feats, bool)> = Vec::with_capacity(config.batch_size);
            while batch.len() < config.batch_size {
                if cursor >= order.len() {
                    if !batch.is_empty() {
                        break;
                    }
                    order = (0..examples.len()).collect();
                    SplitMix64::stream(config.seed, &format!("train/epoch/{epoch}"))
                        .shuffle(&mut order);
                    cursor = 0;
                    epoch += 1;
                }
                let (q, d, positive) = examples[order[cursor]];
                batch.push((features[q].as_slice(), features[d].as_slice(), positive));
                cursor += 1;
            }
            let (loss, batch_grads) = state.batch_gradient_refs(&batch, config.margin);
            step_loss += loss / config.grad_accum as f64;
            let scale = 1.0 / config.grad_accum as f64;
            for (bucket, column) in batch_grads {
                let slot = grads
                    .entry(bucket)
                    .or_insert_with(|| vec![0.0f64; state.embed_dim]);
                for (acc, g) in slot.iter_mut().zip(&column) {
                    *acc += g * scale;
                }
            }
        }
        if !step_loss.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                loss: step_loss,
            });
        }
        trace.push(step_loss);

        let lr = lr_at(config, step).expect("step within schedule");
        let bias1 = 1.0 - BETA1.powi(step as i32);
        let bias2 = 1.0 - BETA2.powi(step as i32);
        for (bucket, column) in &grads {
            let bucket = *bucket as usize;
            for (row, g) in column.iter().enumerate() {
                let idx = row * hash_dim + bucket;
                let m = BETA1 * first_moment[idx] + (1.0 - BETA1) * g;
                let v = BETA2 * second_moment[idx] + (1.0 - BETA2) * g * g;
                first_moment[idx] = m;
                second_moment[idx] = v;
                let update = (m / bias1) / ((v / bias2).sqrt() + ADAM_EPS)
                    + config.weight_decay * state.weights[idx];
                state.weights[idx] -= lr * update;
            }
        }
    }

    Ok((state.to_model(), trace))
}

fn intern(
    text_ids: &mut BTreeMap<String, usize>,
    features: &mut Vec<Vec<(u32, f64)>>,
    featurizer: &FeaturizerConfig,
    text: &str,
) -> usize {
    if let Some(&id) = text_ids.get(text) {
        return id;
    }
    features.push(featurize(featurizer, text));
    let id = features.len() - 1;
    text_ids.insert(text.to_string(), id);
    id
}
