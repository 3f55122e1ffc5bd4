//! Minibatch Adam with an exponentially decaying learning rate, used both for
//! classification-only training and for RRR fine-tuning.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataset::DatasetSplit;
use crate::loss::{classification_loss, explanation_loss, loss_and_gradient, LossError, LossParts, TrainingExample};
use crate::model::{argmax, forward, Mode, ModelConfig, ModelError, ParameterSet};
use crate::seed::derive_seed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("split is empty")]
    EmptySplit,
    #[error("fine-tuning needs annotation masks on the split")]
    MissingMasks,
    #[error("loss diverged ({value}) at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize, value: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub lambda: f64,
    pub explanation_weight: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            lr0: 1e-3,
            lr_decay: 0.95,
            lambda: 1e-4,
            explanation_weight: 1.0,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    /// Defaults for the RRR fine-tuning stage.
    pub fn finetune_default() -> Self {
        Self {
            epochs: 5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.lr0 > 0.0) {
            return bad("lr0 must be > 0");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must be in (0, 1]");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be >= 0");
        }
        if !(self.explanation_weight >= 0.0) {
            return bad("explanation_weight must be >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("Adam constants out of range");
        }
        Ok(())
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay.powi(epoch as i32)
    }
}

/// Adam optimizer state.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    pub fn new(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Per-example means over the epoch's batches.
    pub classification: f64,
    pub explanation: f64,
    pub l2: f64,
}

/// Runs the minibatch loop from `theta` and returns the final parameters and
/// per-epoch statistics. `explanation_weight` overrides the config value.
pub fn fit(
    mut theta: ParameterSet,
    split: &DatasetSplit,
    tcfg: &TrainConfig,
    explanation_weight: f64,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(ParameterSet, Vec<EpochStats>), TrainError> {
    tcfg.validate()?;
    if split.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let use_masks = explanation_weight != 0.0;
    if use_masks && split.masks.is_none() {
        return Err(TrainError::MissingMasks);
    }
    let mut adam = Adam::new(theta.values().len(), tcfg.beta1, tcfg.beta2, tcfg.adam_eps);
    let mut order: Vec<usize> = (0..split.len()).collect();
    let mut history = Vec::with_capacity(tcfg.epochs);
    for epoch in 0..tcfg.epochs {
        let lr = tcfg.learning_rate(epoch);
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            tcfg.seed,
            &[1, epoch as u64],
        )));
        let mut sums = LossParts::default();
        for (b, chunk) in order.chunks(tcfg.batch_size).enumerate() {
            let batch: Vec<TrainingExample<'_>> = chunk
                .iter()
                .enumerate()
                .map(|(j, &i)| TrainingExample {
                    image: &split.examples[i].image,
                    label: split.examples[i].label,
                    mask: if use_masks { split.mask(i) } else { None },
                    mode: Mode::Stochastic {
                        seed: derive_seed(tcfg.seed, &[2, epoch as u64, b as u64, j as u64]),
                    },
                })
                .collect();
            let (parts, grad) = loss_and_gradient(&theta, &batch, tcfg.lambda, explanation_weight)?;
            let total = parts.total(explanation_weight);
            if !total.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: b,
                    value: total,
                });
            }
            adam.step(theta.values_mut(), &grad, lr);
            sums.classification += parts.classification;
            sums.explanation += parts.explanation;
            sums.l2 += parts.l2;
        }
        let n = split.len() as f64;
        let stats = EpochStats {
            epoch,
            learning_rate: lr,
            classification: sums.classification / n,
            explanation: sums.explanation / n,
            l2: sums.l2 / order.chunks(tcfg.batch_size).len() as f64,
        };
        on_epoch(&stats);
        history.push(stats);
    }
    Ok((theta, history))
}

/// Classification-only training (cross-entropy + L2) from a seeded initialization.
pub fn train(split: &DatasetSplit, mcfg: &ModelConfig, tcfg: &TrainConfig) -> Result<ParameterSet, TrainError> {
    let theta = ParameterSet::init(mcfg, derive_seed(tcfg.seed, &[0]))?;
    Ok(fit(theta, split, tcfg, 0.0, |_| {})?.0)
}

/// RRR fine-tuning from `theta0` with the configured explanation weight.
pub fn finetune(
    theta0: &ParameterSet,
    split: &DatasetSplit,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<ParameterSet, TrainError> {
    let mut theta = theta0.clone();
    theta.set_dropout_rate(mcfg.dropout_rate);
    if split.masks.is_none() {
        return Err(TrainError::MissingMasks);
    }
    Ok(fit(theta, split, tcfg, tcfg.explanation_weight, |_| {})?.0)
}

/// Deterministic-mode argmax accuracy.
pub fn accuracy(theta: &ParameterSet, split: &DatasetSplit) -> Result<f64, TrainError> {
    if split.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let mut correct = 0usize;
    for ex in &split.examples {
        let trace = forward(theta, &ex.image, Mode::Deterministic)?;
        if argmax(&trace.probs) == ex.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / split.len() as f64)
}

/// Mean deterministic-mode cross-entropy over a split.
pub fn mean_classification_loss(theta: &ParameterSet, split: &DatasetSplit) -> Result<f64, TrainError> {
    if split.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let mut total = 0.0;
    for ex in &split.examples {
        let probs = forward(theta, &ex.image, Mode::Deterministic)?.probs;
        total += classification_loss(&[probs], &[ex.label]);
    }
    Ok(total / split.len() as f64)
}

/// Mean RRR explanation loss over a masked split.
pub fn mean_explanation_loss(theta: &ParameterSet, split: &DatasetSplit) -> Result<f64, TrainError> {
    if split.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    if split.masks.is_none() {
        return Err(TrainError::MissingMasks);
    }
    let batch: Vec<TrainingExample<'_>> = split
        .examples
        .iter()
        .enumerate()
        .map(|(i, ex)| TrainingExample {
            image: &ex.image,
            label: ex.label,
            mask: split.mask(i),
            mode: Mode::Deterministic,
        })
        .collect();
    Ok(explanation_loss(theta, &batch)? / split.len() as f64)
}
