//! Video salient object detection with lightweight non-local self-attention,
//! cross-level co-attention, gated aggregation, and contrastive region
//! features, built on a small reverse-mode tensor library.

pub mod attention;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{GradTape, Tensor, Var};
