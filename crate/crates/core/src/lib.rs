//! Calibrated inverse-propensity-scoring for recommendation on data that is
//! Missing Not At Random (MNAR).
//!
//! The crate covers the full debiasing pipeline:
//!
//! - [`data`]: Coat / Yahoo! R3 loading, rating binarization, MNAR splits, and
//!   balanced observation datasets for propensity training.
//! - [`synth`]: synthetic MNAR worlds with known ground-truth propensities,
//!   used to audit the estimator theory numerically.
//! - [`nn`]: a small deterministic embedding+MLP model family with a seeded
//!   minibatch SGD trainer and manual backpropagation.
//! - [`propensity`]: the binary observation classifier and raw score export.
//! - [`calib`]: Platt scaling, MC-Dropout and deep-ensemble averaging, ECE,
//!   and reliability curves.
//! - [`estimators`]: naive / IPS / EIB / doubly-robust error estimators plus
//!   analytic and Monte-Carlo bias audits and generalization-bound terms.
//! - [`recommender`]: baseline, IPS-weighted, and doubly-robust joint
//!   training of the downstream ranking model.
//! - [`eval`]: DCG@K and (unnormalized) Recall@K on the MAR test split.
//! - [`pipeline`]: the end-to-end driver, configuration, and report emission.

pub mod calib;
pub mod data;
pub mod estimators;
pub mod eval;
pub mod nn;
pub mod pipeline;
pub mod propensity;
pub mod recommender;
pub mod seed;
pub mod synth;
