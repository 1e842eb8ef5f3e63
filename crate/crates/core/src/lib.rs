//! Claims-based risk modelling: hierarchical code features, L1 logistic
//! regression with level-dependent penalties, cross-validation, evaluation,
//! effect aggregation, risk indices and a synthetic cohort generator.

pub mod aggregate;
pub mod cli;
pub mod cohort;
pub mod cv;
pub mod error;
pub mod featurize;
pub mod manifest;
pub mod metrics;
pub mod pipeline;
pub mod riskindex;
pub mod solver;
pub mod synth;
pub mod taxonomy;

pub use error::{Error, Result};
