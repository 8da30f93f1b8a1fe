//! Layers, backbones, and checkpoints.

pub mod batchnorm;
pub mod checkpoint;
pub mod conv;
pub mod graph;
pub mod loss;
pub mod network;
pub mod pool;

pub use batchnorm::{BatchNorm, Mode};
pub use conv::conv2d;
pub use graph::{Arch, HeadKind, Layer, LayerGraph};
pub use loss::softmax_cross_entropy;
pub use network::{ForwardOutput, Network};
pub use pool::maxpool2d;
