//! Attention-driven object discovery, Sinkhorn refinement, cross-attention
//! tracking and teacher–student distillation for self-supervised pretraining
//! from video, at desk scale.

pub mod autodiff;
pub mod data;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod frame;
pub mod params;
pub mod tensor;
pub mod tracker;
pub mod trainer;
pub mod transport;

pub use error::{DoraError, Result};
