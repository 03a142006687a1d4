//! Adversarial semi-supervised training of structured-output networks.
//!
//! A discriminator learns to tell network outputs on labelled inputs from
//! outputs on unlabelled inputs; its negative log-likelihood becomes the
//! error signal for the unlabelled data. The crate provides the numeric
//! substrate (tensors plus reverse-mode differentiation), the layer zoo and
//! the two network builders, the cost functions and segmentation metrics,
//! SGD with the staged learning-rate schedule, the alternating training
//! loop, a synthetic segmentation dataset, binary persistence formats, and
//! a CLI that reproduces the label-fraction and weight-decay experiment
//! protocols at desk scale.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod models;
pub mod objectives;
pub mod optim;
pub mod layers;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tape::{Tape, VarId};
pub use tensor::Tensor;
