//! Head training: frozen-backbone forward, tape backward over the head,
//! Adam updates, binary cross-entropy, and per-epoch history.
//!
//! The backbone never changes during a run, so its features are computed
//! once per sample and reused across epochs; the numbers are identical to
//! recomputing. Everything downstream of the seed is sequential, so a
//! (seed, data, config) triple always produces bitwise-identical parameters
//! and history.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{
    forward_features, forward_head, head_forward_tape, ArchitectureGraph, ExecutionMode,
    ParameterStore,
};
use crate::data::{Label, Sample};
use crate::error::{Error, Result};
use crate::tensor::autodiff::GradientTape;
use crate::tensor::Tensor;

pub use crate::tensor::ops::bce_loss;

/// Adam hyperparameters. The published training flow names the optimizer and
/// loss but no rates; these defaults are recorded in every history file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone)]
struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Per-parameter first/second moments plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    hyper: AdamHyper,
    step: u64,
    slots: BTreeMap<String, AdamSlot>,
}

impl AdamState {
    /// Tracks exactly the given parameter names, with moments starting at
    /// zero.
    pub fn new(hyper: AdamHyper, tracked: impl IntoIterator<Item = (String, usize)>) -> Self {
        let slots = tracked
            .into_iter()
            .map(|(name, len)| (name, AdamSlot { m: vec![0.0; len], v: vec![0.0; len] }))
            .collect();
        AdamState { hyper, step: 0, slots }
    }

    /// Moments for the trainable parameters of a graph.
    pub fn for_trainable(graph: &ArchitectureGraph, hyper: AdamHyper) -> Self {
        let tracked = graph
            .layers()
            .iter()
            .filter(|l| !l.frozen)
            .flat_map(|l| l.parameters())
            .filter(|p| p.learnable)
            .map(|p| (p.name.clone(), p.count()));
        AdamState::new(hyper, tracked)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. `grads` must cover exactly the
    /// tracked parameters.
    pub fn apply(&mut self, params: &mut ParameterStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for name in grads.keys() {
            if !self.slots.contains_key(name) {
                return Err(Error::argument(format!(
                    "gradient for `{name}` does not match any tracked parameter"
                )));
            }
        }
        if let Some(missing) = self.slots.keys().find(|k| !grads.contains_key(*k)) {
            return Err(Error::argument(format!(
                "tracked parameter `{missing}` is missing its gradient"
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let h = self.hyper;
        let bias1 = 1.0 - h.beta1.powi(t);
        let bias2 = 1.0 - h.beta2.powi(t);
        for (name, slot) in &mut self.slots {
            let grad = &grads[name];
            let mut value = params.get(name)?.clone();
            if value.len() != slot.m.len() {
                return Err(Error::argument(format!(
                    "parameter `{name}` changed size under the optimizer"
                )));
            }
            for ((theta, g), (m, v)) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(slot.m.iter_mut().zip(slot.v.iter_mut()))
            {
                *m = h.beta1 * *m + (1.0 - h.beta1) * g;
                *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *theta -= h.learning_rate * m_hat / (v_hat.sqrt() + h.epsilon);
            }
            params.set(name, value)?;
        }
        Ok(())
    }
}

/// Training-run knobs; defaults mirror the documented hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(flatten)]
    pub adam: AdamHyper,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 25, batch_size: 16, adam: AdamHyper::default(), seed: 42 }
    }
}

/// One completed epoch's metrics; validation is the held-out test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

/// Hyperparameters and model identity recorded alongside the history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainProvenance {
    pub variant: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub total_parameters: usize,
    pub trainable_parameters: usize,
}

/// Per-epoch records plus provenance; serializes to the history file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochHistory {
    pub provenance: TrainProvenance,
    pub history: Vec<EpochRecord>,
}

impl EpochHistory {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }

    pub fn write_file(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::file(path, e))
    }
}

/// A trained store plus what happened per epoch.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub store: ParameterStore,
    pub history: EpochHistory,
}

fn batch_features(
    graph: &ArchitectureGraph,
    store: &ParameterStore,
    samples: &[Sample],
    batch_size: usize,
) -> Result<Vec<Tensor>> {
    let mut features = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let pixels: Vec<&Tensor> = chunk.iter().map(|s| &s.pixels).collect();
        let batch = Tensor::stack(&pixels)?;
        let feats = forward_features(graph, store, &batch)?;
        // Split back into per-sample tensors for epoch-level re-batching.
        let per = feats.len() / chunk.len();
        let mut shape = feats.shape().to_vec();
        shape[0] = 1;
        for i in 0..chunk.len() {
            features.push(Tensor::new(shape.clone(), feats.data()[i * per..(i + 1) * per].to_vec())?);
        }
    }
    Ok(features)
}

fn stack_features(features: &[Tensor], indices: &[usize]) -> Result<Tensor> {
    let refs: Vec<&Tensor> = indices.iter().map(|&i| &features[i]).collect();
    let stacked = Tensor::stack(&refs)?;
    // stack adds an axis over [1, ...] slices; fold it away.
    let mut shape = stacked.shape().to_vec();
    shape.remove(1);
    shape[0] = indices.len();
    stacked.reshape(shape)
}

fn targets_for(samples: &[Sample], indices: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(indices.len() * 2);
    for &i in indices {
        data.extend_from_slice(samples[i].one_hot().data());
    }
    Tensor::new(vec![indices.len(), 2], data).expect("two columns per row")
}

fn accuracy_of(probs: &Tensor, samples: &[Sample], indices: &[usize]) -> usize {
    indices
        .iter()
        .enumerate()
        .filter(|(row, &i)| {
            let p = &probs.data()[row * 2..row * 2 + 2];
            let predicted = if p[0] >= p[1] { 0 } else { 1 };
            predicted == samples[i].label.class_index()
        })
        .count()
}

/// Trains the head of `graph` on `train_set`, validating each epoch against
/// `val_set`. The backbone is bitwise-untouched; only head parameters move.
pub fn train(
    graph: &ArchitectureGraph,
    store: ParameterStore,
    train_set: &[Sample],
    val_set: &[Sample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::argument("training split is empty"));
    }
    if val_set.is_empty() {
        return Err(Error::argument("validation split is empty"));
    }
    if config.batch_size == 0 {
        return Err(Error::argument("batch size must be positive"));
    }
    if graph.trainable_parameters() == 0 {
        return Err(Error::argument("graph has no trainable head parameters"));
    }
    store.validate_against(graph)?;

    let provenance = TrainProvenance {
        variant: graph.variant().to_string(),
        epochs: config.epochs,
        batch_size: config.batch_size,
        learning_rate: config.adam.learning_rate,
        beta1: config.adam.beta1,
        beta2: config.adam.beta2,
        epsilon: config.adam.epsilon,
        seed: config.seed,
        total_parameters: graph.total_parameters(),
        trainable_parameters: graph.trainable_parameters(),
    };
    let mut store = store;
    let mut history = EpochHistory { provenance, history: Vec::new() };
    if config.epochs == 0 {
        return Ok(TrainOutcome { store, history });
    }

    let train_features = batch_features(graph, &store, train_set, config.batch_size)?;
    let val_features = batch_features(graph, &store, val_set, config.batch_size)?;
    let val_indices: Vec<usize> = (0..val_set.len()).collect();

    let mut adam = AdamState::for_trainable(graph, config.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        // The last partial batch is kept so epoch metrics cover every sample.
        for batch in order.chunks(config.batch_size) {
            let features = stack_features(&train_features, batch)?;
            let targets = targets_for(train_set, batch);
            let step_seed = rng.next_u64();
            let mut tape = GradientTape::new();
            let probs = head_forward_tape(graph, &store, &features, step_seed, &mut tape)?;
            let loss = tape.bce_loss(probs, targets)?;
            loss_sum += tape.value(loss).item()? * batch.len() as f64;
            correct += accuracy_of(tape.value(probs), train_set, batch);
            let grads = tape.backward(loss)?;
            adam.apply(&mut store, &grads)?;
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let train_acc = correct as f64 / train_set.len() as f64;

        let mut val_loss_sum = 0.0;
        let mut val_correct = 0usize;
        for batch in val_indices.chunks(config.batch_size) {
            let features = stack_features(&val_features, batch)?;
            let targets = targets_for(val_set, batch);
            let probs = forward_head(graph, &store, &features, ExecutionMode::Infer)?;
            val_loss_sum += bce_loss(&probs, &targets)? * batch.len() as f64;
            val_correct += accuracy_of(&probs, val_set, batch);
        }
        let val_loss = val_loss_sum / val_set.len() as f64;
        let val_acc = val_correct as f64 / val_set.len() as f64;

        history.history.push(EpochRecord { epoch, train_loss, train_acc, val_loss, val_acc });
    }
    Ok(TrainOutcome { store, history })
}

/// One screening decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// `[p_covid, p_normal]`.
    pub probabilities: [f64; 2],
    pub label: Label,
    pub confidence: f64,
}

/// Runs the full graph in inference mode over a `[N,C,H,W]` batch.
pub fn predict(
    graph: &ArchitectureGraph,
    store: &ParameterStore,
    batch: &Tensor,
) -> Result<Vec<Prediction>> {
    let probs = crate::arch::forward(graph, store, batch, ExecutionMode::Infer)?;
    let n = probs.shape()[0];
    let mut out = Vec::with_capacity(n);
    for row in 0..n {
        let p = [probs.data()[row * 2], probs.data()[row * 2 + 1]];
        let class = if p[0] >= p[1] { 0 } else { 1 };
        out.push(Prediction {
            probabilities: p,
            label: Label::from_class_index(class)?,
            confidence: p[class],
        });
    }
    Ok(out)
}

/// Predicts a single preprocessed `[C,H,W]` image.
pub fn predict_one(
    graph: &ArchitectureGraph,
    store: &ParameterStore,
    pixels: &Tensor,
) -> Result<Prediction> {
    let batch = Tensor::stack(&[pixels])?;
    Ok(predict(graph, store, &batch)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{assemble_model, init_parameters, Backbone, HeadKind, ModelVariant};
    use crate::data::synthetic::separable_dataset;

    #[test]
    fn adam_first_step_closed_form() {
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::from_slice(&[0.0]));
        let mut adam = AdamState::new(AdamHyper::default(), [("w".to_string(), 1)]);
        let grads = BTreeMap::from([("w".to_string(), Tensor::from_slice(&[1.0]))]);
        adam.apply(&mut store, &grads).unwrap();
        // m-hat = v-hat = 1 exactly after bias correction, so the update is
        // lr / (1 + eps).
        let expected = -1e-3 / (1.0 + 1e-8);
        let got = store.get("w").unwrap().data()[0];
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::from_slice(&[0.25, -0.5]));
        let mut adam = AdamState::new(AdamHyper::default(), [("w".to_string(), 2)]);
        let grads = BTreeMap::from([("w".to_string(), Tensor::from_slice(&[0.0, 0.0]))]);
        adam.apply(&mut store, &grads).unwrap();
        assert_eq!(store.get("w").unwrap().data(), &[0.25, -0.5]);
    }

    #[test]
    fn adam_zero_learning_rate_is_identity() {
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::from_slice(&[1.5]));
        let hyper = AdamHyper { learning_rate: 0.0, ..AdamHyper::default() };
        let mut adam = AdamState::new(hyper, [("w".to_string(), 1)]);
        let grads = BTreeMap::from([("w".to_string(), Tensor::from_slice(&[3.0]))]);
        adam.apply(&mut store, &grads).unwrap();
        assert_eq!(store.get("w").unwrap().data(), &[1.5]);
    }

    #[test]
    fn adam_name_mismatch_is_named() {
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::from_slice(&[0.0]));
        let mut adam = AdamState::new(AdamHyper::default(), [("w".to_string(), 1)]);
        let grads = BTreeMap::from([("typo".to_string(), Tensor::from_slice(&[1.0]))]);
        let err = adam.apply(&mut store, &grads).unwrap_err();
        assert!(err.to_string().contains("typo"));
    }

    #[test]
    fn adam_determinism_over_ten_steps() {
        let run = || {
            let mut store = ParameterStore::new();
            store.insert("w", Tensor::from_slice(&[0.1, -0.2, 0.3]));
            let mut adam = AdamState::new(AdamHyper::default(), [("w".to_string(), 3)]);
            for step in 0..10 {
                let g = Tensor::from_slice(&[0.5 - step as f64 * 0.05, 0.1, -0.3]);
                let grads = BTreeMap::from([("w".to_string(), g)]);
                adam.apply(&mut store, &grads).unwrap();
            }
            store.get("w").unwrap().data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let graph = assemble_model(ModelVariant::new(Backbone::Micro, HeadKind::GapDense));
        let store = init_parameters(&graph, 5);
        let samples = separable_dataset(8, 32, 1);
        let config = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let outcome = train(&graph, store.clone(), &samples[..6], &samples[6..], &config).unwrap();
        assert_eq!(outcome.store, store);
        assert!(outcome.history.history.is_empty());
    }

    #[test]
    fn empty_train_split_rejected() {
        let graph = assemble_model(ModelVariant::new(Backbone::Micro, HeadKind::GapDense));
        let store = init_parameters(&graph, 5);
        let samples = separable_dataset(4, 32, 1);
        let err = train(&graph, store, &[], &samples, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Argument(_)));
    }

    #[test]
    fn short_training_is_deterministic_and_freezes_backbone() {
        let graph = assemble_model(ModelVariant::new(Backbone::Micro, HeadKind::GapDense));
        let store = init_parameters(&graph, 5);
        let samples = separable_dataset(24, 32, 2);
        let (train_set, val_set) = samples.split_at(20);
        let config = TrainConfig { epochs: 2, batch_size: 8, ..TrainConfig::default() };

        let a = train(&graph, store.clone(), train_set, val_set, &config).unwrap();
        let b = train(&graph, store.clone(), train_set, val_set, &config).unwrap();
        assert_eq!(a.store, b.store);
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.history.len(), 2);
        for record in &a.history.history {
            assert!(record.train_loss.is_finite() && record.val_loss.is_finite());
        }

        // Backbone tensors are bitwise-identical before and after training.
        for layer in graph.layers().iter().filter(|l| l.frozen) {
            for param in layer.parameters() {
                assert_eq!(
                    store.get(&param.name).unwrap().data(),
                    a.store.get(&param.name).unwrap().data(),
                    "{} moved during training",
                    param.name
                );
            }
        }
        // Head parameters did move.
        assert_ne!(
            store.get("head.dense2.weight").unwrap().data(),
            a.store.get("head.dense2.weight").unwrap().data()
        );
    }

    #[test]
    fn duplicate_images_predict_identically() {
        let graph = assemble_model(ModelVariant::new(Backbone::Micro, HeadKind::GapDense));
        let store = init_parameters(&graph, 7);
        let sample = &separable_dataset(2, 32, 3)[0];
        let batch = Tensor::stack(&[&sample.pixels, &sample.pixels]).unwrap();
        let preds = predict(&graph, &store, &batch).unwrap();
        assert_eq!(preds[0], preds[1]);
        let sum: f64 = preds[0].probabilities.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert_eq!(
            preds[0].label.class_index(),
            if preds[0].probabilities[0] >= preds[0].probabilities[1] { 0 } else { 1 }
        );
    }
}
