//! Core library for a malware-image classifier: a small split-transform-merge
//! CNN with a boosted auxiliary channel, plus a deep-feature classifier
//! ensemble (linear SVM, MLP, AdaBoostM1) and evaluation/report tooling.

pub mod augment;
pub mod checkpoint;
pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod image;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod pca;
pub mod report;
pub mod split;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
