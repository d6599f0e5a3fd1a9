//! Stochastic variational EM for linear classifiers with very large
//! categorical outputs.
//!
//! The central object is an augmented lower bound on the categorical
//! log-likelihood: each observation gets one auxiliary error variable, and the
//! intractable sum over classes becomes a sum of pairwise log-CDF terms that
//! can be subsampled without bias. Fitting alternates cheap closed-form (or
//! one-sample reparameterized) updates of the per-observation variational
//! parameters with stochastic natural-parameter updates of the shared linear
//! model.
//!
//! Module map:
//!
//! - [`noise`]: the three noise families (Gumbel, Gaussian, logistic) plus
//!   location–scale variational distributions.
//! - [`bounds`]: single-observation bounds and estimators — exact softmax,
//!   quadrature reference, augmented bounds with and without class
//!   subsampling, and the one-vs-each product bound.
//! - [`model`]: dense linear model (weights + biases) with a binary
//!   serialization format.
//! - [`data`]: sparse datasets, text loaders, and synthetic generators.
//! - [`train`]: the stochastic variational EM loop and step-size machinery.
//! - [`exact`]: exact-gradient softmax baseline sharing the same schedule.
//! - [`eval`]: held-out metrics (exact and importance-sampled log-likelihood,
//!   accuracy, probability recovery error).

pub mod bounds;
pub mod data;
pub mod error;
pub mod eval;
pub mod exact;
pub mod model;
pub mod noise;
pub mod train;

pub use bounds::{ClassSample, UtilityRow};
pub use data::{Dataset, SparseExample};
pub use error::{Error, Result};
pub use eval::{IsConfig, IsEstimate};
pub use model::LinearModel;
pub use noise::{LocScale, NoiseKind};
pub use train::{
    AlphaSchedule, IterationRecord, LocalStore, Method, TrainConfig, TrainOutput,
};

