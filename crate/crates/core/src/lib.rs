//! Cost-sensitive self-training for non-decomposable classification metrics.
//!
//! The crate optimizes linear functionals of the confusion matrix
//! (worst-case recall, coverage-constrained mean recall) with gain-matrix
//! losses, weighted consistency regularization under KL-based pseudo-label
//! selection, and Lagrangian outer loops, and numerically verifies the
//! error bound that justifies the approach on Gaussian-mixture ground
//! truth.
//!
//! Modules:
//! - [`metrics`]: confusion matrices and every metric read off them.
//! - [`gain`]: gain-matrix construction, `G = M D` factorization, and
//!   multiplier updates.
//! - [`losses`]: hybrid supervised loss, weighted consistency, KL masking.
//! - [`model`]: a small MLP with analytic gradients and SGD.
//! - [`data`]: long-tailed Gaussian-mixture generation and augmentations.
//! - [`selftrain`]: the training orchestration and baselines.
//! - [`theory`]: Monte-Carlo verification of the expansion-based bound.

pub mod data;
pub mod error;
pub mod gain;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod selftrain;
pub mod theory;

pub use error::{Error, Result};
pub use gain::{GainMatrix, LagrangeState, MultiplierRule};
pub use losses::{LogitVector, ProbVector};
pub use metrics::{ConfusionMatrix, GroupPartition, WeightMatrix};
pub use model::MlpModel;
