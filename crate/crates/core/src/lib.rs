//! Token-length extension for contrastive dual encoders.
//!
//! The crate swaps a text encoder's absolute positional table for rotary
//! (or contextual) positions, distills the fixed-window teacher into the
//! relative-position student, and then stretches the context window with
//! NTK-aware frequency scaling and a joint short/long contrastive objective.

pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod pipeline;
pub mod posenc;
pub mod tape;
pub mod training;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{AttnMask, GradTape, Var};
pub use tensor::Tensor;
