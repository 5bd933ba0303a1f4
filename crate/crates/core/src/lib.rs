//! Adversarial-input detection for dense classifiers by model mutation.
//!
//! An input whose predicted label flips under many slightly mutated copies
//! of the model is likely adversarial. This crate provides the pieces to
//! measure and act on that:
//!
//! - [`nn`]: a small dense network engine (inference, gradients, SGD)
//! - [`data`]: IDX/MNIST loading, synthetic blobs, splits
//! - [`attacks`]: FGSM and JSMA sample generation
//! - [`mutation`]: the GF/WS/NS/NAI operators and accuracy-filtered pools
//! - [`analysis`]: label change rate, confidence intervals, ROC/AUROC
//! - [`detector`]: the sequential probability ratio test and calibration

pub mod analysis;
pub mod attacks;
pub mod data;
pub mod detector;
pub mod error;
pub mod mutation;
pub mod nn;
pub mod seed;

pub use error::{Error, Result};
