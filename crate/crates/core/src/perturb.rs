//! Patch-exchange perturbation on a square grid and MC-dropout certainty.

use thiserror::Error;

use crate::dataset::{GrayImage, NUM_CLASSES};
use crate::model::{conv_features, dropout_mask, dropout_scale, ModelError, ParameterSet};
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PerturbError {
    #[error("cell {cell} outside 1..={cells}")]
    CellOutOfRange { cell: usize, cells: usize },
    #[error("image side {image} is not divisible by patch side {patch}")]
    Grid { image: usize, patch: usize },
    #[error("image side {found} does not match grid side {expected}")]
    ImageSide { expected: usize, found: usize },
    #[error("MC dropout needs at least one pass")]
    NoPasses,
    #[error("no target images")]
    NoTargets,
    #[error("class {0} out of range")]
    Class(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Square grid of `patch_side` cells over an `image_side` image, numbered
/// 1.. row-major from the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    image_side: usize,
    patch_side: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            image_side: 28,
            patch_side: 4,
        }
    }
}

impl GridSpec {
    pub fn new(image_side: usize, patch_side: usize) -> Result<Self, PerturbError> {
        if patch_side == 0 || image_side == 0 || !image_side.is_multiple_of(patch_side) {
            return Err(PerturbError::Grid {
                image: image_side,
                patch: patch_side,
            });
        }
        Ok(Self { image_side, patch_side })
    }

    pub fn image_side(&self) -> usize {
        self.image_side
    }

    pub fn patch_side(&self) -> usize {
        self.patch_side
    }

    pub fn per_row(&self) -> usize {
        self.image_side / self.patch_side
    }

    pub fn cells(&self) -> usize {
        self.per_row() * self.per_row()
    }

    /// Top-left `(row, col)` of a 1-based cell.
    pub fn cell_bounds(&self, cell: usize) -> Result<(usize, usize), PerturbError> {
        if cell == 0 || cell > self.cells() {
            return Err(PerturbError::CellOutOfRange {
                cell,
                cells: self.cells(),
            });
        }
        let per_row = self.per_row();
        Ok((
            self.patch_side * ((cell - 1) / per_row),
            self.patch_side * ((cell - 1) % per_row),
        ))
    }
}

pub fn cell_bounds(cell: usize, grid: &GridSpec) -> Result<(usize, usize), PerturbError> {
    grid.cell_bounds(cell)
}

/// Swaps the patch at `cell` between two images, returning new images.
pub fn patch_exchange(
    source: &GrayImage,
    target: &GrayImage,
    cell: usize,
    grid: &GridSpec,
) -> Result<(GrayImage, GrayImage), PerturbError> {
    for img in [source, target] {
        if img.side() != grid.image_side() {
            return Err(PerturbError::ImageSide {
                expected: grid.image_side(),
                found: img.side(),
            });
        }
    }
    let (r0, c0) = grid.cell_bounds(cell)?;
    let (mut s, mut t) = (source.clone(), target.clone());
    let side = grid.image_side();
    let (sp, tp) = (s.pixels_mut(), t.pixels_mut());
    for r in r0..r0 + grid.patch_side() {
        let row = r * side;
        sp[row + c0..row + c0 + grid.patch_side()].swap_with_slice(&mut tp[row + c0..row + c0 + grid.patch_side()]);
    }
    Ok((s, t))
}

/// Copy of `source` with the patch at `cell` taken from `target`.
pub(crate) fn paste_patch(source: &GrayImage, target: &GrayImage, r0: usize, c0: usize, patch: usize) -> GrayImage {
    let mut out = source.clone();
    let side = source.side();
    let tp = target.pixels();
    let op = out.pixels_mut();
    for r in r0..r0 + patch {
        let row = r * side;
        op[row + c0..row + c0 + patch].copy_from_slice(&tp[row + c0..row + c0 + patch]);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertaintyEstimate {
    pub mean_prob: f64,
    pub passes: usize,
    pub seed: u64,
}

/// Fixed set of `T` dropout masks bound to a parameter set. Pass `t` uses the
/// mask of a stochastic forward seeded with `derive_seed(seed, [t])`, so one
/// pass reproduces `forward(.., Mode::Stochastic { seed: derive_seed(seed, &[t]) })`.
pub struct McDropout<'a> {
    theta: &'a ParameterSet,
    /// Dense weights transposed to `[features, classes]`.
    weights_t: Vec<f64>,
    masks: Vec<Vec<bool>>,
    scale: f64,
    seed: u64,
}

impl<'a> McDropout<'a> {
    pub fn new(theta: &'a ParameterSet, passes: usize, seed: u64) -> Result<Self, PerturbError> {
        if passes == 0 {
            return Err(PerturbError::NoPasses);
        }
        let features = theta.features();
        let w = theta.fc_weights();
        let mut weights_t = vec![0.0; w.len()];
        for k in 0..NUM_CLASSES {
            for d in 0..features {
                weights_t[d * NUM_CLASSES + k] = w[k * features + d];
            }
        }
        let masks = (0..passes)
            .map(|t| dropout_mask(features, theta.dropout_rate(), pass_seed(seed, t)))
            .collect();
        Ok(Self {
            theta,
            weights_t,
            masks,
            scale: dropout_scale(theta.dropout_rate()),
            seed,
        })
    }

    pub fn passes(&self) -> usize {
        self.masks.len()
    }

    /// Mean over passes of the softmax probability of `label`.
    pub fn certainty(&self, x: &GrayImage, label: usize) -> Result<f64, PerturbError> {
        if label >= NUM_CLASSES {
            return Err(PerturbError::Class(label));
        }
        self.theta.check_image(x)?;
        let (_, post) = conv_features(self.theta, x);
        let active: Vec<(usize, f64)> = post
            .iter()
            .enumerate()
            .filter(|(_, &a)| a != 0.0)
            .map(|(d, &a)| (d, a))
            .collect();
        let bias = self.theta.fc_bias();
        let mut mean = 0.0;
        for (t, mask) in self.masks.iter().enumerate() {
            let mut acc = [0.0f64; NUM_CLASSES];
            for &(d, a) in &active {
                if mask[d] {
                    let h = a * self.scale;
                    let w = &self.weights_t[d * NUM_CLASSES..(d + 1) * NUM_CLASSES];
                    for (o, &wk) in acc.iter_mut().zip(w) {
                        *o += wk * h;
                    }
                }
            }
            for (o, &b) in acc.iter_mut().zip(bias) {
                *o += b;
            }
            let max = acc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = acc.iter().map(|&z| (z - max).exp()).sum();
            let p = (acc[label] - max).exp() / denom;
            // running mean: exact when every pass agrees
            mean += (p - mean) / (t + 1) as f64;
        }
        Ok(mean)
    }

    pub fn estimate(&self, x: &GrayImage, label: usize) -> Result<CertaintyEstimate, PerturbError> {
        Ok(CertaintyEstimate {
            mean_prob: self.certainty(x, label)?,
            passes: self.passes(),
            seed: self.seed,
        })
    }
}

pub fn pass_seed(seed: u64, pass: usize) -> u64 {
    derive_seed(seed, &[pass as u64])
}

/// Mean probability of `label` over `passes` seeded stochastic forwards.
pub fn mc_certainty(
    theta: &ParameterSet,
    x: &GrayImage,
    label: usize,
    passes: usize,
    seed: u64,
) -> Result<CertaintyEstimate, PerturbError> {
    McDropout::new(theta, passes, seed)?.estimate(x, label)
}

/// Certainty of one source image under patch exchange at every grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationCurve {
    pub source_index: usize,
    pub baseline: CertaintyEstimate,
    /// `per_cell[r - 1]` is the mean certainty over targets for cell `r`.
    pub per_cell: Vec<f64>,
    /// Certainty for every (cell, target) pair, targets in input order.
    pub per_target: Vec<Vec<f64>>,
    pub n_targets: usize,
}

impl PerturbationCurve {
    pub fn passes(&self) -> usize {
        self.baseline.passes
    }

    /// Certainty drop `baseline - per_cell` for every cell.
    pub fn drops(&self) -> Vec<f64> {
        self.per_cell.iter().map(|&v| self.baseline.mean_prob - v).collect()
    }
}

/// Order-independent mean: sorts before accumulating.
pub(crate) fn stable_mean(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut mean = 0.0;
    for (i, v) in sorted.iter().enumerate() {
        mean += (v - mean) / (i + 1) as f64;
    }
    mean
}

/// Perturbs `source` with every target at every cell and scores the perturbed
/// source's certainty for `label`. All evaluations in one sweep share the same
/// `passes` dropout masks, so exchanging with an identical patch reproduces
/// the baseline exactly.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    theta: &ParameterSet,
    source_index: usize,
    source: &GrayImage,
    label: usize,
    targets: &[GrayImage],
    grid: &GridSpec,
    passes: usize,
    seed: u64,
) -> Result<PerturbationCurve, PerturbError> {
    if targets.is_empty() {
        return Err(PerturbError::NoTargets);
    }
    for img in std::iter::once(source).chain(targets) {
        if img.side() != grid.image_side() {
            return Err(PerturbError::ImageSide {
                expected: grid.image_side(),
                found: img.side(),
            });
        }
    }
    let mc = McDropout::new(theta, passes, seed)?;
    let baseline = mc.estimate(source, label)?;
    let mut per_cell = Vec::with_capacity(grid.cells());
    let mut per_target = Vec::with_capacity(grid.cells());
    for cell in 1..=grid.cells() {
        let (r0, c0) = grid.cell_bounds(cell)?;
        let scores = targets
            .iter()
            .map(|t| mc.certainty(&paste_patch(source, t, r0, c0, grid.patch_side()), label))
            .collect::<Result<Vec<_>, _>>()?;
        per_cell.push(stable_mean(&scores));
        per_target.push(scores);
    }
    Ok(PerturbationCurve {
        source_index,
        baseline,
        per_cell,
        per_target,
        n_targets: targets.len(),
    })
}
