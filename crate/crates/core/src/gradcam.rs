//! GradCAM saliency for the one-conv classifier.
//!
//! The conv output is already at input resolution, so maps need no upsampling.
//! Gradients are taken in deterministic mode with respect to the conv layer's
//! output, through its ReLU, so only surviving (positive) units carry weight.

use std::io::Write;
use std::path::Path;

use crate::dataset::GrayImage;
use crate::model::{conv_features, ModelError, ParameterSet};

/// Below this range a map is treated as constant and normalizes to zeros.
pub const DEGENERATE_RANGE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    side: usize,
    values: Vec<f64>,
    normalized: bool,
}

impl SaliencyMap {
    pub fn new(side: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), side * side, "saliency map size");
        Self {
            side,
            values,
            normalized: false,
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.side + col]
    }

    /// 8-bit binary PGM (P5). Values are scaled by the map maximum unless the
    /// map is already normalized.
    pub fn to_pgm(&self) -> Vec<u8> {
        let max = if self.normalized {
            1.0
        } else {
            self.values.iter().copied().fold(0.0, f64::max)
        };
        let mut out = format!("P5\n{} {}\n255\n", self.side, self.side).into_bytes();
        out.extend(self.values.iter().map(|&v| {
            if max > 0.0 {
                ((v / max).clamp(0.0, 1.0) * 255.0).round() as u8
            } else {
                0
            }
        }));
        out
    }

    pub fn write_pgm(&self, path: &Path) -> std::io::Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_pgm())
    }
}

/// d(logit of `class`) with respect to the conv layer output, given its
/// pre-activations: the class row of the dense weights on units with a
/// positive pre-activation, zero elsewhere.
pub fn logit_grad_wrt_activations(theta: &ParameterSet, pre: &[f64], class: usize) -> Vec<f64> {
    theta
        .fc_row(class)
        .iter()
        .zip(pre)
        .map(|(&w, &z)| if z > 0.0 { w } else { 0.0 })
        .collect()
}

/// GradCAM channel weights: spatial mean of the logit gradient per filter.
pub fn channel_weights(theta: &ParameterSet, pre: &[f64], class: usize) -> Vec<f64> {
    let plane = theta.side() * theta.side();
    logit_grad_wrt_activations(theta, pre, class)
        .chunks_exact(plane)
        .map(|c| c.iter().sum::<f64>() / plane as f64)
        .collect()
}

/// Weighted channel sum before the final ReLU.
pub fn weighted_sum(weights: &[f64], activations: &[f64], plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; plane];
    for (&alpha, act) in weights.iter().zip(activations.chunks_exact(plane)) {
        for (o, &a) in out.iter_mut().zip(act) {
            *o += alpha * a;
        }
    }
    out
}

/// Unnormalized map from precomputed conv pre-activations and post-ReLU maps.
pub fn gradcam_from_activations(theta: &ParameterSet, pre: &[f64], post: &[f64], class: usize) -> SaliencyMap {
    let plane = theta.side() * theta.side();
    let raw = weighted_sum(&channel_weights(theta, pre, class), post, plane);
    SaliencyMap::new(theta.side(), raw.into_iter().map(|v| v.max(0.0)).collect())
}

pub fn gradcam(theta: &ParameterSet, x: &GrayImage, class: usize) -> Result<SaliencyMap, ModelError> {
    theta.check_image(x)?;
    if class >= crate::dataset::NUM_CLASSES {
        return Err(ModelError::Config(format!("class {class} out of range")));
    }
    let (pre, post) = conv_features(theta, x);
    Ok(gradcam_from_activations(theta, &pre, &post, class))
}

/// Positions of the (first) minimum and maximum.
pub(crate) fn min_max_positions(values: &[f64]) -> (usize, usize) {
    let (mut lo, mut hi) = (0, 0);
    for (i, &v) in values.iter().enumerate() {
        if v < values[lo] {
            lo = i;
        }
        if v > values[hi] {
            hi = i;
        }
    }
    (lo, hi)
}

pub fn norm_minmax(map: &SaliencyMap) -> SaliencyMap {
    let (lo, hi) = min_max_positions(&map.values);
    let (min, range) = (map.values[lo], map.values[hi] - map.values[lo]);
    let values = if range < DEGENERATE_RANGE {
        vec![0.0; map.values.len()]
    } else {
        map.values.iter().map(|&v| (v - min) / range).collect()
    };
    SaliencyMap {
        side: map.side,
        values,
        normalized: true,
    }
}

/// Backward pass of min-max normalization: given dL/dN, returns dL/dG for the
/// input map G. The argmin/argmax identities are held fixed; a degenerate map
/// has zero gradient.
pub(crate) fn norm_minmax_backward(input: &[f64], normalized: &[f64], upstream: &[f64]) -> Vec<f64> {
    let (lo, hi) = min_max_positions(input);
    let range = input[hi] - input[lo];
    if range < DEGENERATE_RANGE {
        return vec![0.0; input.len()];
    }
    let mut grad: Vec<f64> = upstream.iter().map(|u| u / range).collect();
    let sum_u: f64 = upstream.iter().sum();
    let sum_un: f64 = upstream.iter().zip(normalized).map(|(u, n)| u * n).sum();
    grad[hi] -= sum_un / range;
    grad[lo] += (sum_un - sum_u) / range;
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensor::{finite_difference_grad, relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(filters: usize) -> ModelConfig {
        ModelConfig {
            filters,
            image_side: 8,
            ..ModelConfig::default()
        }
    }

    fn random_image(side: usize, rng: &mut ChaCha8Rng) -> GrayImage {
        GrayImage::new(side, (0..side * side).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_map() {
        let mut theta = ParameterSet::init(&ModelConfig::default(), 4).unwrap();
        theta.conv_bias_mut().fill(0.0);
        let map = gradcam(&theta, &GrayImage::zeros(28), 3).unwrap();
        assert!(map.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_filter_matches_scratch_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut theta = ParameterSet::init(&small_cfg(1), 2).unwrap();
        for v in theta.values_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let x = random_image(8, &mut rng);
        let class = 4;
        // activations from first principles
        let k = theta.conv_kernels().to_vec();
        let b = theta.conv_bias()[0];
        let z: Vec<f64> = (0..64)
            .map(|i| {
                let (r, c) = ((i / 8) as isize, (i % 8) as isize);
                let mut acc = 0.0;
                for dr in -1..=1isize {
                    for dc in -1..=1isize {
                        let (rr, cc) = (r + dr, c + dc);
                        if (0..8).contains(&rr) && (0..8).contains(&cc) {
                            acc += k[((dr + 1) * 3 + dc + 1) as usize] * x.get(rr as usize, cc as usize);
                        }
                    }
                }
                acc + b
            })
            .collect();
        assert!(z.iter().all(|v| v.abs() > 1e-4), "resample: unit at the ReLU kink");
        let act: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
        // d logit / d(conv output) by finite differences through the ReLU
        let row = theta.fc_row(class).to_vec();
        let bias = theta.fc_bias()[class];
        let logit = |z: &[f64]| z.iter().zip(&row).map(|(p, q)| p.max(0.0) * q).sum::<f64>() + bias;
        let dlogit = finite_difference_grad(logit, &z, 1e-5).unwrap();
        let alpha = dlogit.iter().sum::<f64>() / 64.0;
        let expected: Vec<f64> = act.iter().map(|a| (alpha * a).max(0.0)).collect();
        let map = gradcam(&theta, &x, class).unwrap();
        for (m, e) in map.values().iter().zip(&expected) {
            assert!((m - e).abs() < 1e-9, "{m} vs {e}");
        }
    }

    #[test]
    fn internal_logit_gradient_matches_finite_differences() {
        let theta = ParameterSet::init(&small_cfg(2), 6).unwrap();
        let x = random_image(8, &mut ChaCha8Rng::seed_from_u64(1));
        let (pre, _) = conv_features(&theta, &x);
        assert!(pre.iter().all(|v| v.abs() > 1e-4), "resample: unit at the ReLU kink");
        let class = 2;
        let logit = |z: &[f64]| {
            z.iter()
                .zip(theta.fc_row(class))
                .map(|(p, q)| p.max(0.0) * q)
                .sum::<f64>()
                + theta.fc_bias()[class]
        };
        let fd = finite_difference_grad(logit, &pre, 1e-5).unwrap();
        assert!(pre.iter().any(|&v| v < 0.0) && pre.iter().any(|&v| v > 0.0));
        for (a, b) in logit_grad_wrt_activations(&theta, &pre, class).iter().zip(&fd) {
            assert!(relative_error(*a, *b, 1e-8) < 1e-4);
        }
    }

    #[test]
    fn other_class_weights_do_not_matter() {
        let theta = ParameterSet::init(&ModelConfig::default(), 5).unwrap();
        let x = random_image(28, &mut ChaCha8Rng::seed_from_u64(3));
        let before = gradcam(&theta, &x, 7).unwrap();
        let mut other = theta.clone();
        let d = other.features();
        for (i, w) in other.fc_weights_mut().iter_mut().enumerate() {
            if i / d != 7 {
                *w += 0.37;
            }
        }
        assert_eq!(before, gradcam(&other, &x, 7).unwrap());
    }

    #[test]
    fn scale_covariance() {
        let theta = ParameterSet::init(&small_cfg(3), 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_image(8, &mut rng);
        let class = (0..10)
            .find(|&c| gradcam(&theta, &x, c).unwrap().values().iter().any(|&v| v > 0.0))
            .unwrap();
        let base = gradcam(&theta, &x, class).unwrap();
        let mut scaled = theta.clone();
        let d = scaled.features();
        for w in &mut scaled.fc_weights_mut()[class * d..(class + 1) * d] {
            *w *= 2.5;
        }
        let map = gradcam(&scaled, &x, class).unwrap();
        for (a, b) in base.values().iter().zip(map.values()) {
            assert!((2.5 * a - b).abs() < 1e-12);
        }
        let (na, nb) = (norm_minmax(&base), norm_minmax(&map));
        for (a, b) in na.values().iter().zip(nb.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn norm_examples() {
        let ramp = SaliencyMap::new(2, vec![0.0, 1.0, 2.0, 3.0]);
        let n = norm_minmax(&ramp);
        assert_eq!(n.values(), &[0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);
        assert!(n.is_normalized());
        let flat = norm_minmax(&SaliencyMap::new(2, vec![0.4; 4]));
        assert!(flat.values().iter().all(|&v| v == 0.0));
        let fixed = SaliencyMap::new(2, vec![0.0, 0.25, 1.0, 0.5]);
        assert_eq!(norm_minmax(&fixed).values(), fixed.values());
    }

    #[test]
    fn normalized_range_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let v: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..5.0)).collect();
            let n = norm_minmax(&SaliencyMap::new(4, v));
            let max = n.values().iter().copied().fold(0.0, f64::max);
            assert!(n.values().iter().all(|&x| (0.0..=1.0).contains(&x)));
            assert_eq!(max, 1.0);
        }
    }

    #[test]
    fn norm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input: Vec<f64> = (0..9).map(|_| rng.gen_range(0.0..3.0)).collect();
        let weights: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |g: &[f64]| {
            let n = norm_minmax(&SaliencyMap::new(3, g.to_vec()));
            n.values().iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>()
        };
        let n = norm_minmax(&SaliencyMap::new(3, input.clone()));
        let analytic = norm_minmax_backward(&input, n.values(), &weights);
        let fd = finite_difference_grad(loss, &input, 1e-6).unwrap();
        for (a, b) in analytic.iter().zip(&fd) {
            assert!(relative_error(*a, *b, 1e-8) < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn pgm_header() {
        let pgm = SaliencyMap::new(2, vec![0.0, 1.0, 2.0, 4.0]).to_pgm();
        assert!(pgm.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&pgm[pgm.len() - 4..], &[0, 64, 128, 255]);
    }
}
