//! Desk-scale unified multimodal model: one transformer that learns text
//! prediction and flow-matching image generation over a shared token
//! sequence, with the data generator, quality control, curriculum trainer
//! and metrics around it.

// `!(x > 0.0)` is how parameter checks reject NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod objectives;
pub mod pipeline;
mod process;
pub mod quality;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Image, ModelConfig, UnifiedModel};
pub use tensor::{Graph, Tensor, Var};
