//! Selective mixup fine-tuning of linear classifiers for non-decomposable
//! objectives.
//!
//! A model `W` (d×K) over frozen feature vectors is fine-tuned by feature-space
//! mixup between class pairs `(i, j)`. Pairs are sampled from a softmax over a
//! gain matrix that estimates, for every pair, how much one SGD step on the
//! centroid mixup loss moves the target metric `ψ(C)` of the confusion matrix.
//!
//! Module map:
//!
//! - [`metrics`]: confusion matrices, the nine objectives, gradients with
//!   respect to the unconstrained (softmax) parameterization, Lagrange updates.
//! - [`classifier`]: logits, mixup loss, centroids, mixup direction matrices.
//! - [`gain`]: the centroid gain approximation and its finite-difference oracle.
//! - [`policy`]: pair-sampling distributions and the online-game simulator.
//! - [`trainer`]: the cycle loop (validation, λ refresh, gains, SGD, pseudo-labels).
//! - [`data`]: long-tailed Gaussian features, CSV I/O, stratified splits.
//! - [`theory`]: numerical checks of the convergence rate and the mixup
//!   regularization expansion.
//! - [`cli`]: the `selmix` command line.

// `!(x >= 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classifier;
pub mod cli;
pub mod data;
pub mod error;
pub mod gain;
pub mod metrics;
pub mod policy;
pub mod rng;
pub mod theory;
pub mod trainer;

pub use classifier::{CentroidSet, LinearModel, MixupSample};
pub use data::{FeatureDataset, LtSpec};
pub use error::{Result, SelmixError};
pub use gain::GainMatrix;
pub use metrics::{ConfusionMatrix, LagrangeState, MetricKind, MetricSpec};
pub use policy::MixPolicy;
pub use trainer::{RunHistory, TrainerConfig};
