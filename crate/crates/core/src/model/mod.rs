//! Shared-encoder network with a segmentation decoder and a depth decoder.

pub mod checkpoint;
pub mod layers;
pub mod network;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use network::{ModelConfig, Network, ParamGroup, Prediction};
pub use tensor::{Scalar, Tensor};
