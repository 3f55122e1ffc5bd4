//! The fixed classifier: 3x3 same-padded conv -> ReLU -> dropout -> dense -> softmax.

use rand::Rng;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataset::{GrayImage, IMAGE_SIDE, NUM_CLASSES};
use crate::tensor::{conv2d_same_raw, dense_affine_raw, softmax_slice, Tensor};

pub const KERNEL_SIDE: usize = 3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("image side {image} does not match model side {model}")]
    ImageSide { image: usize, model: usize },
    #[error("parameter vector has {found} entries, expected {expected}")]
    ParamCount { expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub filters: usize,
    pub dropout_rate: f64,
    pub classes: usize,
    pub image_side: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            filters: 8,
            dropout_rate: 0.5,
            classes: NUM_CLASSES,
            image_side: IMAGE_SIDE,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.filters == 0 {
            return Err(ModelError::Config("filters must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.classes != NUM_CLASSES {
            return Err(ModelError::Config(format!("classes must be {NUM_CLASSES}")));
        }
        if self.image_side < KERNEL_SIDE {
            return Err(ModelError::Config("image side smaller than the kernel".into()));
        }
        Ok(())
    }
}

/// All trainable weights, stored contiguously in the order
/// conv kernels `[F,1,3,3]`, conv bias `[F]`, fc weights `[10, F*S*S]`, fc bias `[10]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    filters: usize,
    side: usize,
    dropout_rate: f64,
    values: Vec<f64>,
}

/// Names of the four parameter blocks, in storage order.
pub const BLOCK_NAMES: [&str; 4] = ["conv_kernels", "conv_bias", "fc_weights", "fc_bias"];

impl ParameterSet {
    pub fn zeros(cfg: &ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut p = Self {
            filters: cfg.filters,
            side: cfg.image_side,
            dropout_rate: cfg.dropout_rate,
            values: Vec::new(),
        };
        p.values = vec![0.0; p.block_len_total()];
        Ok(p)
    }

    pub fn from_values(cfg: &ModelConfig, values: Vec<f64>) -> Result<Self, ModelError> {
        let mut p = Self::zeros(cfg)?;
        if values.len() != p.values.len() {
            return Err(ModelError::ParamCount {
                expected: p.values.len(),
                found: values.len(),
            });
        }
        p.values = values;
        Ok(p)
    }

    /// Glorot-uniform initialization per layer, biases zero.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let mut p = Self::zeros(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k2 = KERNEL_SIDE * KERNEL_SIDE;
        let conv_limit = (6.0 / (k2 + cfg.filters * k2) as f64).sqrt();
        for v in p.conv_kernels_mut() {
            *v = rng.gen_range(-conv_limit..conv_limit);
        }
        let fc_limit = (6.0 / (p.features() + NUM_CLASSES) as f64).sqrt();
        for v in p.fc_weights_mut() {
            *v = rng.gen_range(-fc_limit..fc_limit);
        }
        Ok(p)
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            filters: self.filters,
            dropout_rate: self.dropout_rate,
            classes: NUM_CLASSES,
            image_side: self.side,
        }
    }

    pub fn filters(&self) -> usize {
        self.filters
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn set_dropout_rate(&mut self, p: f64) {
        assert!((0.0..1.0).contains(&p), "dropout rate outside [0, 1)");
        self.dropout_rate = p;
    }

    /// Length of the flattened feature vector, `F * S * S`.
    pub fn features(&self) -> usize {
        self.filters * self.side * self.side
    }

    pub fn block_lens(&self) -> [usize; 4] {
        [
            self.filters * KERNEL_SIDE * KERNEL_SIDE,
            self.filters,
            NUM_CLASSES * self.features(),
            NUM_CLASSES,
        ]
    }

    fn block_len_total(&self) -> usize {
        self.block_lens().iter().sum()
    }

    pub fn block_shapes(&self) -> [Vec<usize>; 4] {
        [
            vec![self.filters, 1, KERNEL_SIDE, KERNEL_SIDE],
            vec![self.filters],
            vec![NUM_CLASSES, self.features()],
            vec![NUM_CLASSES],
        ]
    }

    fn block_range(&self, block: usize) -> std::ops::Range<usize> {
        let lens = self.block_lens();
        let start: usize = lens[..block].iter().sum();
        start..start + lens[block]
    }

    /// Which block a flat coordinate belongs to.
    pub fn block_of(&self, index: usize) -> &'static str {
        (0..4)
            .find(|&b| self.block_range(b).contains(&index))
            .map_or("out of range", |b| BLOCK_NAMES[b])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn conv_kernels(&self) -> &[f64] {
        &self.values[self.block_range(0)]
    }
    pub fn conv_bias(&self) -> &[f64] {
        &self.values[self.block_range(1)]
    }
    pub fn fc_weights(&self) -> &[f64] {
        &self.values[self.block_range(2)]
    }
    pub fn fc_bias(&self) -> &[f64] {
        &self.values[self.block_range(3)]
    }
    pub fn conv_kernels_mut(&mut self) -> &mut [f64] {
        let r = self.block_range(0);
        &mut self.values[r]
    }
    pub fn conv_bias_mut(&mut self) -> &mut [f64] {
        let r = self.block_range(1);
        &mut self.values[r]
    }
    pub fn fc_weights_mut(&mut self) -> &mut [f64] {
        let r = self.block_range(2);
        &mut self.values[r]
    }
    pub fn fc_bias_mut(&mut self) -> &mut [f64] {
        let r = self.block_range(3);
        &mut self.values[r]
    }

    /// Row of the dense layer feeding `class`.
    pub fn fc_row(&self, class: usize) -> &[f64] {
        let d = self.features();
        &self.fc_weights()[class * d..(class + 1) * d]
    }

    pub fn blocks_as_tensors(&self) -> [Tensor; 4] {
        let shapes = self.block_shapes();
        std::array::from_fn(|b| {
            Tensor::new(shapes[b].clone(), self.values[self.block_range(b)].to_vec()).expect("block shape")
        })
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn sum_of_squares(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub(crate) fn check_image(&self, x: &GrayImage) -> Result<(), ModelError> {
        if x.side() != self.side {
            return Err(ModelError::ImageSide {
                image: x.side(),
                model: self.side,
            });
        }
        Ok(())
    }
}

/// Whether dropout is active for a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Deterministic,
    /// Inverted dropout with a mask drawn from this seed.
    Stochastic {
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Conv output before the ReLU, `[F, S, S]` flattened.
    pub conv_pre: Vec<f64>,
    /// Post-ReLU feature maps (the GradCAM activations).
    pub conv_post: Vec<f64>,
    /// Kept (true) / dropped (false) per activation; `None` in deterministic mode.
    pub dropout_mask: Option<Vec<bool>>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Draws an inverted-dropout keep mask: each unit kept with probability `1 - p`.
pub fn dropout_mask(len: usize, p: f64, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let threshold = keep_threshold(p);
    (0..len).map(|_| u64::from(rng.next_u32()) < threshold).collect()
}

fn keep_threshold(p: f64) -> u64 {
    ((1.0 - p) * 4_294_967_296.0).round() as u64
}

pub fn dropout_scale(p: f64) -> f64 {
    1.0 / (1.0 - p)
}

/// Post-ReLU conv activations (and pre-activations) for an image.
pub fn conv_features(theta: &ParameterSet, x: &GrayImage) -> (Vec<f64>, Vec<f64>) {
    let s = theta.side();
    let mut pre = vec![0.0; theta.features()];
    conv2d_same_raw(
        x.pixels(),
        1,
        s,
        s,
        theta.conv_kernels(),
        theta.filters(),
        KERNEL_SIDE,
        KERNEL_SIDE,
        theta.conv_bias(),
        &mut pre,
    );
    let post = pre.iter().map(|&v| v.max(0.0)).collect();
    (pre, post)
}

/// Applies the dropout mask and inverted scaling to activations.
pub(crate) fn apply_dropout(post: &[f64], mask: &[bool], p: f64) -> Vec<f64> {
    let scale = dropout_scale(p);
    post.iter()
        .zip(mask)
        .map(|(&a, &keep)| if keep { a * scale } else { 0.0 })
        .collect()
}

pub fn forward(theta: &ParameterSet, x: &GrayImage, mode: Mode) -> Result<ForwardTrace, ModelError> {
    theta.check_image(x)?;
    let (conv_pre, conv_post) = conv_features(theta, x);
    let (dropout_mask, hidden) = match mode {
        Mode::Deterministic => (None, None),
        Mode::Stochastic { seed } => {
            let mask = dropout_mask(conv_post.len(), theta.dropout_rate(), seed);
            let hidden = apply_dropout(&conv_post, &mask, theta.dropout_rate());
            (Some(mask), Some(hidden))
        }
    };
    let mut logits = vec![0.0; NUM_CLASSES];
    dense_affine_raw(
        hidden.as_deref().unwrap_or(&conv_post),
        theta.fc_weights(),
        theta.fc_bias(),
        &mut logits,
    );
    let probs = softmax_slice(&logits);
    Ok(ForwardTrace {
        conv_pre,
        conv_post,
        dropout_mask,
        logits,
        probs,
    })
}

/// Deterministic-mode argmax class (first maximum on ties).
pub fn predict(theta: &ParameterSet, x: &GrayImage) -> Result<usize, ModelError> {
    let trace = forward(theta, x, Mode::Deterministic)?;
    Ok(argmax(&trace.probs))
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_image(side: usize, seed: u64) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GrayImage::new(side, (0..side * side).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn no_dropout_means_modes_agree() {
        let cfg = ModelConfig {
            dropout_rate: 0.0,
            ..ModelConfig::default()
        };
        let theta = ParameterSet::init(&cfg, 3).unwrap();
        let x = random_image(28, 1);
        let det = forward(&theta, &x, Mode::Deterministic).unwrap();
        let sto = forward(&theta, &x, Mode::Stochastic { seed: 77 }).unwrap();
        assert_eq!(det.logits, sto.logits);
        assert_eq!(det.probs, sto.probs);
        assert!(sto.dropout_mask.unwrap().iter().all(|&k| k));
    }

    #[test]
    fn stochastic_forward_is_seeded() {
        let theta = ParameterSet::init(&ModelConfig::default(), 3).unwrap();
        let x = random_image(28, 2);
        let a = forward(&theta, &x, Mode::Stochastic { seed: 5 }).unwrap();
        let b = forward(&theta, &x, Mode::Stochastic { seed: 5 }).unwrap();
        let c = forward(&theta, &x, Mode::Stochastic { seed: 6 }).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.dropout_mask, c.dropout_mask);
        let det1 = forward(&theta, &x, Mode::Deterministic).unwrap();
        let det2 = forward(&theta, &x, Mode::Deterministic).unwrap();
        assert_eq!(det1, det2);
    }

    #[test]
    fn zero_input_zero_bias_is_uniform() {
        let mut theta = ParameterSet::init(&ModelConfig::default(), 9).unwrap();
        theta.conv_bias_mut().fill(0.0);
        theta.fc_bias_mut().fill(0.0);
        let trace = forward(&theta, &GrayImage::zeros(28), Mode::Stochastic { seed: 1 }).unwrap();
        assert!(trace.logits.iter().all(|&l| l == 0.0));
        assert!(trace.probs.iter().all(|&p| (p - 0.1).abs() < 1e-15));
    }

    #[test]
    fn dropout_keeps_about_half() {
        let mask = dropout_mask(100_000, 0.5, 4);
        let kept = mask.iter().filter(|&&k| k).count() as f64 / 1e5;
        assert!((kept - 0.5).abs() < 0.01, "{kept}");
    }

    #[test]
    fn trace_invariants() {
        let theta = ParameterSet::init(&ModelConfig::default(), 1).unwrap();
        let t = forward(&theta, &random_image(28, 8), Mode::Stochastic { seed: 2 }).unwrap();
        for (pre, post) in t.conv_pre.iter().zip(&t.conv_post) {
            assert_eq!(*post, pre.max(0.0));
        }
        assert_eq!(t.probs, softmax_slice(&t.logits));
    }

    #[test]
    fn config_validation() {
        assert!(ParameterSet::zeros(&ModelConfig {
            filters: 0,
            ..ModelConfig::default()
        })
        .is_err());
        assert!(ParameterSet::zeros(&ModelConfig {
            dropout_rate: 1.0,
            ..ModelConfig::default()
        })
        .is_err());
        let theta = ParameterSet::zeros(&ModelConfig::default()).unwrap();
        assert_eq!(theta.values().len(), 8 * 9 + 8 + 10 * 8 * 784 + 10);
        assert_eq!(theta.block_of(0), "conv_kernels");
        assert_eq!(theta.block_of(72), "conv_bias");
        assert_eq!(theta.block_of(80), "fc_weights");
        assert_eq!(theta.block_of(theta.values().len() - 1), "fc_bias");
        assert!(forward(&theta, &GrayImage::zeros(8), Mode::Deterministic).is_err());
    }
}
