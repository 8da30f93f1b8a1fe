//! Layer-consensus image classifiers.
//!
//! Every tapped layer of a convolutional backbone is summarized into a
//! channel vector, scored against learnable per-class prototypes by cosine
//! similarity, and the per-layer scores are summed into the final logits.
//! The crate carries its own small reverse-mode autodiff engine, the layer
//! library and backbones, the data and perturbation pipeline, the training
//! loop, a DeepFool attack, and an experiment runner.

pub mod adversarial;
pub mod autodiff;
pub mod consensus;
pub mod data;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
