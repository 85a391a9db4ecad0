//! Desk-scale adversarial-robustness laboratory: a voting defense built
//! from secretly transformed and resized classifiers, a white-box attack
//! suite, substitute-model black-box pipelines, the δ comparison metric,
//! and decision-region map rendering.

pub mod attacks;
pub mod blackbox;
pub mod bufferviz;
pub mod config;
pub mod dataio;
pub mod defense;
pub mod error;
pub mod exec;
pub mod metrics;
pub mod models;
pub mod runner;
pub mod seeding;
pub mod tensor;
pub mod transforms;

pub use error::{Error, Result};
