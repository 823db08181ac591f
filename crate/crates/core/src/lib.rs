//! Training and evaluation stack for adversarial debiasing experiments on
//! synthetic biased image data: a minimal reverse-mode autodiff engine, a
//! dual-head CNN (shared backbone, predictor head, adversarial head), the
//! two-pass debiasing update, filter-similarity ablation for picking
//! fine-tune layers, fairness metrics (AUC, TPR disparity, 80% rule), and a
//! deterministic synthetic data generator with patient-wise splits.

pub mod ablation;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fairness;
pub mod fixtures;
pub mod fsio;
pub mod gradcheck;
pub mod model;
pub mod graph;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;
