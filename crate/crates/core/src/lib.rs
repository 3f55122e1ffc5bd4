//! Find and remove spurious image regions a classifier depends on.
//!
//! The crate builds a class-wise decoy version of Fashion-MNIST, trains a
//! one-conv classifier, sweeps a 4x4 patch exchange over a 7x7 grid while
//! measuring MC-dropout certainty, and fine-tunes the model with a
//! GradCAM-based "right for the right reasons" penalty so that the decoy
//! patches stop mattering.
//!
//! Runnable walkthroughs live in `examples/`; the `spurious-audit` binary
//! drives the whole pipeline from the command line.

pub mod audit;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod gradcam;
pub mod loss;
pub mod model;
pub mod perturb;
pub mod seed;
pub mod tensor;
pub mod train;

pub use audit::{change_metrics, emit_report, identify_spurious, run_audit, AuditConfig, AuditReport, MetricSummary};
pub use dataset::{inject_decoys, load_idx, AnnotationMask, DatasetSplit, DecoySpec, GrayImage, LabeledExample};
pub use gradcam::{gradcam, norm_minmax, SaliencyMap};
pub use loss::{classification_loss, combined_loss, explanation_loss, loss_gradient, TrainingExample};
pub use model::{forward, ForwardTrace, Mode, ModelConfig, ParameterSet};
pub use perturb::{cell_bounds, mc_certainty, patch_exchange, sweep, CertaintyEstimate, GridSpec, PerturbationCurve};
pub use tensor::{conv2d_same, dense_affine, finite_difference_grad, softmax, Tensor};
pub use train::{accuracy, finetune, train, TrainConfig};
