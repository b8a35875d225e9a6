//! Training classifiers that ignore a known dataset bias.
//!
//! A frozen bias-only model supplies per-example class distributions; the main
//! model is trained through an ensemble with it (bias product, learned mixin,
//! learned mixin with an entropy penalty) or against reweighted examples, and
//! is then evaluated alone on data where the bias is randomized.
//!
//! Module map:
//! - [`ndcore`]: matrix, stable elementwise functions, PRNG, gradient oracle
//! - [`synth`]: synthetic biased datasets and exact Bayes posteriors
//! - [`models`]: the main classifier and the bias-only model
//! - [`ensembles`]: the debiasing objectives and their gradients
//! - [`train`]: Adam and the training loop
//! - [`analyze`]: accuracies, bias agreement, gate statistics, correlations

pub mod analyze;
pub mod ensembles;
pub mod error;
pub mod models;
pub mod ndcore;
pub mod persist;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
