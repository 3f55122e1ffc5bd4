//! Shared fixtures for the integration suites.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spurious_audit::dataset::{AnnotationMask, GrayImage};
use spurious_audit::gradcam::{channel_weights, weighted_sum};
use spurious_audit::loss::{explanation_loss, TrainingExample};
use spurious_audit::model::{conv_features, Mode, ModelConfig, ParameterSet};
use spurious_audit::tensor::relative_error;

pub const SMALL_SIDE: usize = 8;

/// A random small model with a batch of masked, dropout-seeded examples.
pub struct GradInstance {
    pub theta: ParameterSet,
    pub images: Vec<GrayImage>,
    pub labels: Vec<usize>,
    pub masks: Vec<AnnotationMask>,
    pub seeds: Vec<u64>,
}

impl GradInstance {
    pub fn random(rng: &mut ChaCha8Rng, batch: usize) -> Self {
        let cfg = ModelConfig {
            filters: 2,
            image_side: SMALL_SIDE,
            ..ModelConfig::default()
        };
        let n = ParameterSet::zeros(&cfg).unwrap().values().len();
        let theta = ParameterSet::from_values(&cfg, (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap();
        let images = (0..batch)
            .map(|_| {
                GrayImage::new(
                    SMALL_SIDE,
                    (0..SMALL_SIDE * SMALL_SIDE).map(|_| rng.gen::<f64>()).collect(),
                )
                .unwrap()
            })
            .collect();
        let labels = (0..batch).map(|_| rng.gen_range(0..10)).collect();
        let masks = (0..batch)
            .map(|_| {
                AnnotationMask::square(
                    SMALL_SIDE,
                    rng.gen_range(0..SMALL_SIDE - 1),
                    rng.gen_range(0..SMALL_SIDE - 1),
                    2,
                )
            })
            .collect();
        let seeds = (0..batch).map(|_| rng.gen()).collect();
        Self {
            theta,
            images,
            labels,
            masks,
            seeds,
        }
    }

    pub fn batch(&self) -> Vec<TrainingExample<'_>> {
        (0..self.images.len())
            .map(|i| TrainingExample {
                image: &self.images[i],
                label: self.labels[i],
                mask: Some(&self.masks[i]),
                mode: Mode::Stochastic { seed: self.seeds[i] },
            })
            .collect()
    }

    /// Distance from the nearest non-differentiable point (ReLU zero crossing
    /// in the conv or the GradCAM map, or a tie for the map's min / max).
    pub fn kink_distance(&self) -> f64 {
        let mut dist = f64::INFINITY;
        let plane = SMALL_SIDE * SMALL_SIDE;
        for (img, &label) in self.images.iter().zip(&self.labels) {
            let (pre, post) = conv_features(&self.theta, img);
            dist = pre.iter().fold(dist, |d, v| d.min(v.abs()));
            let raw = weighted_sum(&channel_weights(&self.theta, &pre, label), &post, plane);
            dist = raw.iter().fold(dist, |d, v| d.min(v.abs()));
            let mut relu: Vec<f64> = raw.iter().map(|v| v.max(0.0)).collect();
            relu.sort_by(f64::total_cmp);
            let n = relu.len();
            dist = dist.min(relu[n - 1] - relu[n - 2]);
            if relu[0] > 0.0 {
                dist = dist.min(relu[1] - relu[0]);
            }
        }
        dist
    }
}

/// Largest coordinate-wise relative error between two gradients.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> (f64, usize) {
    analytic
        .iter()
        .zip(numeric)
        .enumerate()
        .map(|(i, (a, b))| (relative_error(*a, *b, floor), i))
        .fold((0.0, 0), |acc, x| if x.0 > acc.0 { x } else { acc })
}

/// Draws instances until one sits at least `margin` from every kink and has
/// a non-zero explanation loss, so every loss term carries gradient.
pub fn smooth_instance(rng: &mut ChaCha8Rng, batch: usize, margin: f64) -> GradInstance {
    loop {
        let inst = GradInstance::random(rng, batch);
        if inst.kink_distance() > margin && explanation_loss(&inst.theta, &inst.batch()).unwrap() > 0.0 {
            return inst;
        }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
