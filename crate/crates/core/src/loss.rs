//! Classification, explanation (RRR over GradCAM) and L2 losses with exact
//! analytic gradients.
//!
//! Total objective for a batch:
//! `sum_n -log p(y_n) + w_E * sum_n sum_ij (M_n * norm(GradCAM(x_n)))^2 + lambda * |theta|^2`.
//! The classification term uses each example's own forward mode (its dropout
//! mask is a function of the seed, so it stays fixed under differentiation);
//! the GradCAM term is always deterministic.

use thiserror::Error;

use crate::dataset::{AnnotationMask, GrayImage, NUM_CLASSES};
use crate::gradcam::{channel_weights, norm_minmax, norm_minmax_backward, weighted_sum, SaliencyMap};
use crate::model::{
    apply_dropout, conv_features, dropout_mask, dropout_scale, Mode, ModelError, ParameterSet, KERNEL_SIDE,
};
use crate::tensor::{dense_affine_raw, softmax_slice};

/// Lower clamp applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite gradient in parameter block {block} (coordinate {index})")]
    NonFiniteGradient { block: &'static str, index: usize },
    #[error("label {0} out of range")]
    Label(usize),
    #[error("mask side {mask} does not match image side {image}")]
    MaskSide { mask: usize, image: usize },
}

/// One element of a training batch.
#[derive(Debug, Clone, Copy)]
pub struct TrainingExample<'a> {
    pub image: &'a GrayImage,
    pub label: usize,
    /// Spurious-region annotation; examples without one skip the explanation term.
    pub mask: Option<&'a AnnotationMask>,
    /// Forward mode of the classification term.
    pub mode: Mode,
}

/// `sum_n -ln(max(p_n[y_n], 1e-12))`.
pub fn classification_loss(probs_batch: &[Vec<f64>], labels: &[usize]) -> f64 {
    probs_batch
        .iter()
        .zip(labels)
        .map(|(p, &y)| -p[y].max(PROB_FLOOR).ln())
        .sum()
}

fn check_example(theta: &ParameterSet, ex: &TrainingExample<'_>) -> Result<(), LossError> {
    theta.check_image(ex.image)?;
    if ex.label >= NUM_CLASSES {
        return Err(LossError::Label(ex.label));
    }
    if let Some(m) = ex.mask {
        if m.side() != ex.image.side() {
            return Err(LossError::MaskSide {
                mask: m.side(),
                image: ex.image.side(),
            });
        }
    }
    Ok(())
}

/// Per-image RRR term: `sum_ij (M_ij * norm(map)_ij)^2`.
pub fn explanation_term(map: &SaliencyMap, mask: &AnnotationMask) -> f64 {
    norm_minmax(map)
        .values()
        .iter()
        .zip(mask.bits())
        .map(|(&n, &m)| {
            let v = f64::from(m) * n;
            v * v
        })
        .sum()
}

/// Sum over the batch of the RRR term, GradCAM taken for the true class.
pub fn explanation_loss(theta: &ParameterSet, batch: &[TrainingExample<'_>]) -> Result<f64, LossError> {
    let mut total = 0.0;
    for ex in batch {
        check_example(theta, ex)?;
        if let Some(mask) = ex.mask {
            let (pre, post) = conv_features(theta, ex.image);
            let map = crate::gradcam::gradcam_from_activations(theta, &pre, &post, ex.label);
            total += explanation_term(&map, mask);
        }
    }
    Ok(total)
}

pub fn l2_penalty(theta: &ParameterSet, lambda: f64) -> f64 {
    lambda * theta.sum_of_squares()
}

pub fn combined_loss(
    theta: &ParameterSet,
    batch: &[TrainingExample<'_>],
    lambda: f64,
    explanation_weight: f64,
) -> Result<f64, LossError> {
    let mut probs = Vec::with_capacity(batch.len());
    for ex in batch {
        check_example(theta, ex)?;
        probs.push(crate::model::forward(theta, ex.image, ex.mode)?.probs);
    }
    let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
    let mut loss = classification_loss(&probs, &labels);
    if explanation_weight != 0.0 {
        loss += explanation_weight * explanation_loss(theta, batch)?;
    }
    Ok(loss + l2_penalty(theta, lambda))
}

/// Loss components reported alongside a gradient.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub classification: f64,
    pub explanation: f64,
    pub l2: f64,
}

impl LossParts {
    pub fn total(&self, explanation_weight: f64) -> f64 {
        self.classification + explanation_weight * self.explanation + self.l2
    }
}

/// Analytic gradient of [`combined_loss`].
pub fn loss_gradient(
    theta: &ParameterSet,
    batch: &[TrainingExample<'_>],
    lambda: f64,
    explanation_weight: f64,
) -> Result<Vec<f64>, LossError> {
    loss_and_gradient(theta, batch, lambda, explanation_weight).map(|(_, g)| g)
}

/// Loss components and the analytic gradient in one pass.
pub fn loss_and_gradient(
    theta: &ParameterSet,
    batch: &[TrainingExample<'_>],
    lambda: f64,
    explanation_weight: f64,
) -> Result<(LossParts, Vec<f64>), LossError> {
    let mut grad = GradAccumulator::new(theta);
    let mut parts = LossParts::default();
    for ex in batch {
        check_example(theta, ex)?;
        let (c, e) = accumulate_example(theta, ex, true, explanation_weight, &mut grad);
        parts.classification += c;
        parts.explanation += e;
    }
    parts.l2 = l2_penalty(theta, lambda);
    let mut g = grad.into_flat();
    for (gi, &t) in g.iter_mut().zip(theta.values()) {
        *gi += 2.0 * lambda * t;
    }
    check_finite(theta, g).map(|g| (parts, g))
}

/// Analytic gradient of [`explanation_loss`] alone.
pub fn explanation_gradient(theta: &ParameterSet, batch: &[TrainingExample<'_>]) -> Result<Vec<f64>, LossError> {
    let mut grad = GradAccumulator::new(theta);
    for ex in batch {
        check_example(theta, ex)?;
        accumulate_example(theta, ex, false, 1.0, &mut grad);
    }
    check_finite(theta, grad.into_flat())
}

fn check_finite(theta: &ParameterSet, g: Vec<f64>) -> Result<Vec<f64>, LossError> {
    if let Some(index) = g.iter().position(|v| !v.is_finite()) {
        return Err(LossError::NonFiniteGradient {
            block: theta.block_of(index),
            index,
        });
    }
    Ok(g)
}

struct GradAccumulator {
    conv_k: Vec<f64>,
    conv_b: Vec<f64>,
    fc_w: Vec<f64>,
    fc_b: Vec<f64>,
}

impl GradAccumulator {
    fn new(theta: &ParameterSet) -> Self {
        let [a, b, c, d] = theta.block_lens();
        Self {
            conv_k: vec![0.0; a],
            conv_b: vec![0.0; b],
            fc_w: vec![0.0; c],
            fc_b: vec![0.0; d],
        }
    }

    fn into_flat(self) -> Vec<f64> {
        let mut v = self.conv_k;
        v.extend(self.conv_b);
        v.extend(self.fc_w);
        v.extend(self.fc_b);
        v
    }
}

/// Adds one example's gradient; returns its (classification, explanation) loss.
fn accumulate_example(
    theta: &ParameterSet,
    ex: &TrainingExample<'_>,
    classification: bool,
    explanation_weight: f64,
    grad: &mut GradAccumulator,
) -> (f64, f64) {
    let side = theta.side();
    let plane = side * side;
    let features = theta.features();
    let (pre, post) = conv_features(theta, ex.image);
    let p = theta.dropout_rate();

    // classification term
    let (hidden, mask) = match ex.mode {
        Mode::Deterministic => (post.clone(), None),
        Mode::Stochastic { seed } => {
            let mask = dropout_mask(features, p, seed);
            (apply_dropout(&post, &mask, p), Some(mask))
        }
    };
    let mut logits = vec![0.0; NUM_CLASSES];
    dense_affine_raw(&hidden, theta.fc_weights(), theta.fc_bias(), &mut logits);
    let probs = softmax_slice(&logits);
    let true_prob = probs[ex.label];
    let class_loss = -true_prob.max(PROB_FLOOR).ln();
    let mut dlogits = probs;
    if !classification {
        dlogits.fill(0.0);
    } else if true_prob >= PROB_FLOOR {
        dlogits[ex.label] -= 1.0;
    } else {
        // clamped: the loss is flat in this example's parameters
        dlogits.fill(0.0);
    }

    let mut d_post = vec![0.0; features];
    let fc_w = theta.fc_weights();
    for (k, &dz) in dlogits.iter().enumerate() {
        if dz == 0.0 {
            continue;
        }
        grad.fc_b[k] += dz;
        let row = &fc_w[k * features..(k + 1) * features];
        let g_row = &mut grad.fc_w[k * features..(k + 1) * features];
        for ((g, &h), (dp, &w)) in g_row.iter_mut().zip(&hidden).zip(d_post.iter_mut().zip(row)) {
            *g += dz * h;
            *dp += dz * w;
        }
    }
    if let Some(mask) = &mask {
        let scale = dropout_scale(p);
        for (dp, &keep) in d_post.iter_mut().zip(mask) {
            *dp = if keep { *dp * scale } else { 0.0 };
        }
    }

    // explanation term
    let mut expl_loss = 0.0;
    if let (Some(ann), true) = (ex.mask, explanation_weight != 0.0) {
        let alpha = channel_weights(theta, &pre, ex.label);
        let raw = weighted_sum(&alpha, &post, plane);
        let relu: Vec<f64> = raw.iter().map(|v| v.max(0.0)).collect();
        let norm = norm_minmax(&SaliencyMap::new(side, relu.clone()));
        let mut upstream = vec![0.0; plane];
        for ((u, &n), &m) in upstream.iter_mut().zip(norm.values()).zip(ann.bits()) {
            if m == 1 {
                expl_loss += n * n;
                *u = 2.0 * n;
            }
        }
        let d_relu = norm_minmax_backward(&relu, norm.values(), &upstream);
        let d_raw: Vec<f64> = d_relu
            .iter()
            .zip(&raw)
            .map(|(&g, &r)| if r > 0.0 { explanation_weight * g } else { 0.0 })
            .collect();
        // raw = sum_k alpha_k A^k, alpha_k = mean of the class's dense weights
        // on channel k's surviving units; the gating is locally constant
        let row = &mut grad.fc_w[ex.label * features..(ex.label + 1) * features];
        for (k, &a_k) in alpha.iter().enumerate() {
            let act = &post[k * plane..(k + 1) * plane];
            let d_alpha: f64 = d_raw.iter().zip(act).map(|(g, a)| g * a).sum();
            let share = d_alpha / plane as f64;
            for (g, &z) in row[k * plane..(k + 1) * plane]
                .iter_mut()
                .zip(&pre[k * plane..(k + 1) * plane])
            {
                if z > 0.0 {
                    *g += share;
                }
            }
            for (dp, &g) in d_post[k * plane..(k + 1) * plane].iter_mut().zip(&d_raw) {
                *dp += a_k * g;
            }
        }
    }

    // through the conv ReLU and into the conv parameters
    let x = ex.image.pixels();
    let half = (KERNEL_SIDE / 2) as isize;
    for f in 0..theta.filters() {
        let mut bias_g = 0.0;
        let kg = &mut grad.conv_k[f * KERNEL_SIDE * KERNEL_SIDE..(f + 1) * KERNEL_SIDE * KERNEL_SIDE];
        for r in 0..side {
            for c in 0..side {
                let i = f * plane + r * side + c;
                if pre[i] <= 0.0 || d_post[i] == 0.0 {
                    continue;
                }
                let d = d_post[i];
                bias_g += d;
                for dr in 0..KERNEL_SIDE {
                    let rr = r as isize + dr as isize - half;
                    if rr < 0 || rr >= side as isize {
                        continue;
                    }
                    for dc in 0..KERNEL_SIDE {
                        let cc = c as isize + dc as isize - half;
                        if cc < 0 || cc >= side as isize {
                            continue;
                        }
                        kg[dr * KERNEL_SIDE + dc] += d * x[rr as usize * side + cc as usize];
                    }
                }
            }
        }
        grad.conv_b[f] += bias_g;
    }

    (class_loss, expl_loss)
}
