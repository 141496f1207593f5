//! Parameter-efficient video quality assessment on a frozen two-tower
//! vision-language encoder.
//!
//! Trainable pieces are a shared cross-modal bottleneck adapter on both
//! towers ([`scma`]), a learnable prompt prefix over five quality-level
//! prompts ([`prompt`]), and a similarity-weighted regression head
//! ([`head`]). Frames are chosen by motion-aware samplers ([`sampler`]).

pub mod autograd;
pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod head;
pub mod loss;
pub mod model;
pub mod optim;
pub mod params;
pub mod prompt;
pub mod sampler;
pub mod scma;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
