//! Multi-source vicinal transfer augmentation for robust image classifiers.
//!
//! The crate trains a translator network on the vicinities of clean images
//! (weak augmentations and adversarial perturbations), shuffles the vicinal
//! differences across a batch, and mixes the transferred and generated
//! examples into classifier training with a consistency penalty. Everything
//! runs on a small CPU-only tensor library with reverse-mode autodiff, and
//! every stochastic choice is derived from one experiment seed so artifacts
//! reproduce bit for bit.

pub mod attacks;
pub mod augment;
pub mod config;
pub mod corruptions;
pub mod data;
pub mod error;
pub mod experiment;
pub mod imageops;
pub mod metrics;
pub mod networks;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod vicinal;

pub use error::{Result, VitaError};
pub use tensor::{Tape, Tensor};
