//! Dual encoder: a causal text transformer with a pluggable positional
//! scheme and a patch-embedding image transformer, both projecting into a
//! shared embedding space.

mod checkpoint;
mod config;
mod model;
mod params;

pub use checkpoint::{Checkpoint, Phase, FORMAT_VERSION};
pub use config::{ImageConfig, TextConfig, MLP_RATIO};
pub use model::{
    image_forward, image_vars, patchify, text_forward, text_hidden_states, text_vars, DualEncoder, SequenceEmbedding, TextForward,
    INITIAL_TEMPERATURE,
};
pub use params::{
    image_param_count, init_image, init_text, text_param_count, BlockParams, ImageParams, ImageTensors, TextParams,
    TextTensors, INIT_STD, POSITION_INIT_STD,
};
