//! Adversarial robustness toolkit for small batch-normalized convolutional
//! networks: a reverse-mode tensor engine, FGSM/PGD attacks, standard,
//! adversarial and feature-distortion-regularized training, and per-layer
//! distortion measurement of normalized features.

pub mod autodiff;
pub mod data;
pub mod attacks;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod training;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use rng::RngStream;
pub use tensor::Tensor;
