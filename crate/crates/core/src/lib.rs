//! Mixture outlier exposure for fine-grained out-of-distribution detection.
//!
//! The crate builds holdout-class test environments, synthesizes virtual
//! outliers by mixing ID inputs with auxiliary outliers, trains and
//! fine-tunes a classifier with the outlier-exposure family of objectives,
//! scores it post hoc (MSP, ODIN, energy) and reports TNR at 95% TPR and
//! AUROC against fine- and coarse-grained OOD data.

pub mod data;
pub mod error;
pub mod experiment;
pub mod math;
pub mod metrics;
pub mod mixing;
pub mod model;
pub mod objectives;
pub mod scoring;
pub mod splits;
pub mod synth;
pub mod trainer;
pub mod viz;

pub use error::{Error, Result};
