//! Minimal differentiable-computation core: dense and attention layers,
//! losses, Adam, and gradient verification. Everything downstream (agents,
//! world model, predictors) is built on this module.

pub mod loss;
pub mod network;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tensor;

pub use loss::{bce_loss, cross_entropy_loss, LossError};
pub use network::{grad_check, GradCheckReport, LayerSpec, NetError, Network};
pub use ops::{sigmoid, softmax_rows, EncoderBlock, GruCell};
pub use optim::Adam;
pub use params::{CheckpointError, ParamId, ParamSet};
pub use tensor::Tensor;
