//! Tokenization, corpus files, synthetic image/caption pairs, and batching.

mod batch;
mod corpus;
mod synth;
mod tokenizer;

pub use batch::{batch_indices, make_batch, Batch};
pub use corpus::{load_corpus, save_corpus, Image, ImageCaptionPair, PairMetadata, Primitive};
pub use synth::{
    caption_tokens, generate_synthetic_corpus, render_primitives, AttrOffset, SynthConfig, BRIGHTNESS, IMAGE_SIDE, QUADRANTS,
    SHAPES,
};
pub use tokenizer::{detokenize, tokenize, tokenize_bytes, truncate, TokenSequence, BOS, BYTE_OFFSET, EOS, PAD, VOCAB_SIZE};
