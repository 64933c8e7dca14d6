//! Patch convolutional network (PCNN) for view-based 3D model retrieval.
//!
//! Everything runs on a small dense-tensor core with reverse-mode automatic
//! differentiation ([`tape`]). On top of it sit a trainable patch-feature
//! backbone, the PatchConv neighbourhood layer, adaptive weighted view
//! fusion, the discrimination loss, a deterministic trainer and retrieval
//! evaluation (mAP and precision-recall curves).

pub mod awv;
pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod model;
pub mod optim;
pub mod param;
pub mod patchconv;
pub mod retrieval;
pub mod tape;
pub mod tensor;
pub mod train;

pub use config::{Profile, RunConfig};
pub use error::{Error, Result};
pub use model::{Ablation, InputSpec, LossPreset, ModelConfig, ModelSample, Pcnn};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
