//! Bayesian decoder-only transformer dialogue models with Empirical-Bayes
//! priors and posterior initializations taken from a pretrained (maximum
//! likelihood) checkpoint, plus the lexical-diversity and entailment metrics
//! used to evaluate their responses.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod generation;
pub mod metrics;
pub mod model;
pub mod noise;
pub mod numerics;
pub mod parallel;
pub mod pipeline;
pub mod schedule;
pub mod tokenizer;
pub mod toy;
pub mod training;
pub mod variational;

pub use error::{Error, Result};
pub use numerics::{Real, Tensor};
