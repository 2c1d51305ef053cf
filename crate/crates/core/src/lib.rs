//! Semantic-visual guided transformer pretraining for few-shot
//! class-incremental learning.
//!
//! A small windowed-attention image encoder is trained on the base session
//! under `L_VCE + λ·L_SCE`, where the semantic term scores projected text
//! embeddings of class prompts with the same head. The encoder is then
//! frozen and a nearest-class-mean head is grown over the incremental
//! sessions.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod harness;
pub mod incremental;
pub mod metrics;
pub mod model;
pub mod params;
pub mod protocol;
pub mod tensor;
pub mod text;
pub mod training;
pub mod transformer;
pub mod vision;

pub use error::{Result, SvtError};
pub use tensor::Matrix;
