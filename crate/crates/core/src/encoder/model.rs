use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ImageConfig, TextConfig};
use super::params::{image_param_count, init_image, init_text, BlockParams, ImageParams, ImageTensors, TextParams, TextTensors};
use crate::data::{Image, TokenSequence};
use crate::error::{Error, Result};
use crate::posenc::{PositionalScheme, RotaryFrequencies};
use crate::tape::{AttnMask, GradTape, Var};
use crate::tensor::{Tensor, LAYER_NORM_EPS};

/// Initial contrastive temperature.
pub const INITIAL_TEMPERATURE: f64 = 0.07;

/// One pooled, projected embedding. Compare only after L2 normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceEmbedding {
    pub vector: Vec<f64>,
    /// Number of tokens (or patches) that were pooled.
    pub source_length: usize,
}

impl SequenceEmbedding {
    pub fn cosine(&self, other: &SequenceEmbedding) -> f64 {
        let dot: f64 = self.vector.iter().zip(&other.vector).map(|(a, b)| a * b).sum();
        let na = self.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = other.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        dot / (na * nb)
    }
}

/// Text tower, image tower, and the shared temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct DualEncoder {
    pub text_config: TextConfig,
    pub image_config: ImageConfig,
    pub text: TextTensors,
    pub image: ImageTensors,
    pub temperature: f64,
    /// Seed the weights were initialized from.
    pub seed: u64,
}

impl DualEncoder {
    /// Fresh weights drawn from `seed`: text tower first, then image tower.
    pub fn init(text_config: TextConfig, image_config: ImageConfig, seed: u64) -> Result<Self> {
        text_config.validate()?;
        image_config.validate()?;
        if text_config.projection_dim != image_config.projection_dim {
            return Err(Error::Config(format!(
                "text projection {} and image projection {} differ",
                text_config.projection_dim, image_config.projection_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text = init_text(&text_config, &mut rng);
        let image = init_image(&image_config, &mut rng);
        Ok(DualEncoder {
            text_config,
            image_config,
            text,
            image,
            temperature: INITIAL_TEMPERATURE,
            seed,
        })
    }

    pub fn text_param_count(&self) -> usize {
        self.text.slots().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn image_param_count(&self) -> usize {
        debug_assert_eq!(
            self.image.slots().iter().map(|(_, t)| t.len()).sum::<usize>(),
            image_param_count(&self.image_config)
        );
        image_param_count(&self.image_config)
    }

    /// Rotary frequencies for the text tower's scheme and window.
    pub fn frequencies(&self) -> Result<Option<RotaryFrequencies>> {
        self.text_config
            .scheme
            .frequencies(self.text_config.head_dim(), self.text_config.context)
    }

    pub fn encode_text(&self, tokens: &TokenSequence) -> Result<SequenceEmbedding> {
        let mut tape = GradTape::new();
        let vars = text_vars(&mut tape, &self.text, false);
        let freqs = self.frequencies()?;
        let out = text_forward(&mut tape, &vars, &self.text_config, freqs.as_ref(), tokens.ids(), 0)?;
        Ok(SequenceEmbedding {
            vector: tape.value(out.embedding).data().to_vec(),
            source_length: tokens.len(),
        })
    }

    pub fn encode_image(&self, image: &Image) -> Result<SequenceEmbedding> {
        let mut tape = GradTape::new();
        let vars = image_vars(&mut tape, &self.image, false);
        let emb = image_forward(&mut tape, &vars, &self.image_config, image)?;
        Ok(SequenceEmbedding {
            vector: tape.value(emb).data().to_vec(),
            source_length: self.image_config.n_patches(),
        })
    }

    /// Attention row of the aggregation (last) token in `layer`/`head`.
    pub fn extract_attention(&self, tokens: &TokenSequence, layer: usize, head: usize) -> Result<Vec<f64>> {
        let c = &self.text_config;
        if layer >= c.n_layers || head >= c.n_heads {
            return Err(Error::Index(format!(
                "layer {layer}, head {head} of a {}-layer, {}-head encoder",
                c.n_layers, c.n_heads
            )));
        }
        let mut tape = GradTape::new();
        let vars = text_vars(&mut tape, &self.text, false);
        let freqs = self.frequencies()?;
        let out = text_forward(&mut tape, &vars, c, freqs.as_ref(), tokens.ids(), 0)?;
        let probs = tape
            .attention_probs(out.attention[layer])
            .expect("attention node records probabilities");
        Ok(probs.row(head, tokens.len() - 1).to_vec())
    }
}

/// Puts text parameters on a tape without copying them.
pub fn text_vars(tape: &mut GradTape, params: &TextTensors, trainable: bool) -> TextParams<Var> {
    params
        .map(|_, t| Ok(tape.shared(t, trainable)))
        .expect("placing leaves cannot fail")
}

pub fn image_vars(tape: &mut GradTape, params: &ImageTensors, trainable: bool) -> ImageParams<Var> {
    params
        .map(|_, t| Ok(tape.shared(t, trainable)))
        .expect("placing leaves cannot fail")
}

/// Output of a text forward pass.
pub struct TextForward {
    /// `[1, projection_dim]`.
    pub embedding: Var,
    /// One attention node per layer.
    pub attention: Vec<Var>,
}

struct BlockSetup<'a> {
    n_heads: usize,
    freqs: Option<&'a RotaryFrequencies>,
    positions: &'a [usize],
    mask: AttnMask,
}

fn block_forward(tape: &mut GradTape, x: Var, b: &BlockParams<Var>, s: &BlockSetup) -> Result<(Var, Var)> {
    let h = tape.layer_norm(x, b.ln1_gain, b.ln1_bias, LAYER_NORM_EPS)?;
    let mut q = tape.linear(h, b.wq, Some(b.bq))?;
    let mut k = tape.linear(h, b.wk, Some(b.bk))?;
    let v = tape.linear(h, b.wv, Some(b.bv))?;
    if let Some(freqs) = s.freqs {
        q = tape.rope(q, s.n_heads, freqs, s.positions)?;
        k = tape.rope(k, s.n_heads, freqs, s.positions)?;
    }
    let attn = match b.cope_table {
        Some(table) => tape.cope_attention(q, k, v, table, s.n_heads, s.mask)?,
        None => tape.attention(q, k, v, s.n_heads, s.mask)?,
    };
    let o = tape.linear(attn, b.wo, Some(b.bo))?;
    let x = tape.add(x, o)?;
    let h = tape.layer_norm(x, b.ln2_gain, b.ln2_bias, LAYER_NORM_EPS)?;
    let m = tape.linear(h, b.w1, Some(b.b1))?;
    let m = tape.gelu(m)?;
    let m = tape.linear(m, b.w2, Some(b.b2))?;
    Ok((tape.add(x, m)?, attn))
}

/// Causal text transformer; the hidden state of the last token is projected
/// into the shared space. Keys before `key_start` are hidden from every
/// later query, which lets callers prepend padding.
pub fn text_forward(
    tape: &mut GradTape,
    params: &TextParams<Var>,
    config: &TextConfig,
    freqs: Option<&RotaryFrequencies>,
    ids: &[usize],
    key_start: usize,
) -> Result<TextForward> {
    let (hidden, attention) = text_hidden_states(tape, params, config, freqs, ids, key_start)?;
    let last = tape.select_row(hidden, ids.len() - 1)?;
    let last = tape.layer_norm(last, params.ln_final_gain, params.ln_final_bias, LAYER_NORM_EPS)?;
    let embedding = tape.matmul(last, params.projection)?;
    Ok(TextForward { embedding, attention })
}

/// Per-token outputs of the last block, `[n, d_model]`, and the attention
/// node of every layer.
pub fn text_hidden_states(
    tape: &mut GradTape,
    params: &TextParams<Var>,
    config: &TextConfig,
    freqs: Option<&RotaryFrequencies>,
    ids: &[usize],
    key_start: usize,
) -> Result<(Var, Vec<Var>)> {
    let n = ids.len();
    if n == 0 {
        return Err(Error::Contract("cannot encode an empty token sequence".into()));
    }
    if n > config.context {
        return Err(Error::OutOfWindow {
            n,
            window: config.context,
        });
    }
    if key_start >= n {
        return Err(Error::Contract(format!("padding prefix {key_start} leaves no tokens of {n}")));
    }
    if config.scheme.kind().is_rotary() != freqs.is_some() {
        return Err(Error::Config(format!(
            "scheme `{}` and supplied rotary frequencies disagree",
            config.scheme.kind()
        )));
    }
    let mut x = tape.embedding(params.token_embedding, ids)?;
    let positions: Vec<usize> = (0..n).collect();
    if let PositionalScheme::Absolute = config.scheme {
        let table = params
            .position_table
            .ok_or_else(|| Error::Config("absolute scheme without a position table".into()))?;
        let pos = tape.embedding(table, &positions)?;
        x = tape.add(x, pos)?;
    }
    let setup = BlockSetup {
        n_heads: config.n_heads,
        freqs,
        positions: &positions,
        mask: AttnMask {
            causal: true,
            key_start,
        },
    };
    let mut attention = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let (next, attn) = block_forward(tape, x, block, &setup)?;
        x = next;
        attention.push(attn);
    }
    Ok((x, attention))
}

/// Splits an image into flattened square patches, `[n_patches, patch²]`.
pub fn patchify(image: &Image, config: &ImageConfig) -> Result<Tensor> {
    if image.width != config.image_size || image.height != config.image_size {
        return Err(Error::dims(
            "encode_image",
            &[image.height, image.width],
            &[config.image_size, config.image_size],
        ));
    }
    let (ps, side) = (config.patch_size, config.patches_per_side());
    let mut data = Vec::with_capacity(image.pixels.len());
    for py in 0..side {
        for px in 0..side {
            for dy in 0..ps {
                for dx in 0..ps {
                    data.push(f64::from(image.get(px * ps + dx, py * ps + dy)));
                }
            }
        }
    }
    Tensor::new(vec![config.n_patches(), config.patch_dim()], data)
}

/// Patch embedding, bidirectional transformer, mean-pool, projection.
pub fn image_forward(tape: &mut GradTape, params: &ImageParams<Var>, config: &ImageConfig, image: &Image) -> Result<Var> {
    let patches = tape.constant(patchify(image, config)?);
    let x = tape.linear(patches, params.patch_weight, Some(params.patch_bias))?;
    let mut x = tape.add(x, params.position_table)?;
    let positions: Vec<usize> = (0..config.n_patches()).collect();
    let setup = BlockSetup {
        n_heads: config.n_heads,
        freqs: None,
        positions: &positions,
        mask: AttnMask::FULL,
    };
    for block in &params.blocks {
        x = block_forward(tape, x, block, &setup)?.0;
    }
    let pooled = tape.mean_rows(x)?;
    let pooled = tape.layer_norm(pooled, params.ln_final_gain, params.ln_final_bias, LAYER_NORM_EPS)?;
    tape.matmul(pooled, params.projection)
}
