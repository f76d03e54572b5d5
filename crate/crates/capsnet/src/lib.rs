//! A self-contained vector capsule network engine.
//!
//! The crate provides a minimal dense-tensor library with reverse-mode
//! differentiation, the capsule primitives (squash, vote transforms,
//! routing by agreement), margin/reconstruction objectives, a zoo of
//! capsule and baseline architectures, an image/feature data pipeline
//! with augmentation, and a deterministic trainer with weight archiving,
//! latency benchmarking and finite-difference gradient checking.

pub mod archive;
pub mod bench;
pub mod capsule;
pub mod gradcheck;
pub mod data;
pub mod error;
pub mod linalg;
pub mod lstm;
pub mod model;
pub mod objective;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod zoo;

pub use error::{Error, Result};
pub use linalg::{Activation, Padding};
pub use model::{ForwardOutput, ForwardPass, MaskMode, Model, Prediction};
pub use objective::{DecoderSpec, MarginLossConfig};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::{Scalar, Tensor};
pub use zoo::{InputShape, LayerSpec, ModelSpec};
