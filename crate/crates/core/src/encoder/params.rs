//! Parameter containers, generic over what each slot holds: tensors for
//! storage, tape variables during a forward pass, optimizer moments, and so
//! on. `map` walks the slots in a fixed order with stable dotted names; that
//! order is also the checkpoint payload order.

use std::sync::Arc;

use rand::Rng;

use super::config::{ImageConfig, TextConfig};
use crate::error::Result;
use crate::posenc::PositionalScheme;
use crate::tensor::Tensor;

/// Standard deviation of the normal initializer for weight matrices.
pub const INIT_STD: f64 = 0.02;
/// The text tower's absolute position table starts smaller than the other
/// weights, so token identity dominates the input early on and dropping the
/// table (when converting to relative positions) disturbs the model less.
pub const POSITION_INIT_STD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
    /// Per-head contextual position embeddings, `[heads, p_max + 1, head_dim]`.
    pub cope_table: Option<T>,
    pub ln2_gain: T,
    pub ln2_bias: T,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

impl<T> BlockParams<T> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a T) -> Result<U>) -> Result<BlockParams<U>> {
        let mut g = |name: &str, t: &'a T| f(&format!("{prefix}.{name}"), t);
        Ok(BlockParams {
            ln1_gain: g("ln1_gain", &self.ln1_gain)?,
            ln1_bias: g("ln1_bias", &self.ln1_bias)?,
            wq: g("wq", &self.wq)?,
            bq: g("bq", &self.bq)?,
            wk: g("wk", &self.wk)?,
            bk: g("bk", &self.bk)?,
            wv: g("wv", &self.wv)?,
            bv: g("bv", &self.bv)?,
            wo: g("wo", &self.wo)?,
            bo: g("bo", &self.bo)?,
            cope_table: self.cope_table.as_ref().map(|t| g("cope_table", t)).transpose()?,
            ln2_gain: g("ln2_gain", &self.ln2_gain)?,
            ln2_bias: g("ln2_bias", &self.ln2_bias)?,
            w1: g("w1", &self.w1)?,
            b1: g("b1", &self.b1)?,
            w2: g("w2", &self.w2)?,
            b2: g("b2", &self.b2)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextParams<T> {
    pub token_embedding: T,
    /// Present only under the absolute scheme, `[context, d_model]`.
    pub position_table: Option<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub ln_final_gain: T,
    pub ln_final_bias: T,
    pub projection: T,
}

impl<T> TextParams<T> {
    /// Every slot with its name, in declaration order.
    pub fn slots(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.map(|name, t| {
            out.push((name.to_string(), t));
            Ok(())
        })
        .expect("collecting slots cannot fail");
        out
    }

    pub fn map<'a, U>(&'a self, mut f: impl FnMut(&str, &'a T) -> Result<U>) -> Result<TextParams<U>> {
        Ok(TextParams {
            token_embedding: f("text.token_embedding", &self.token_embedding)?,
            position_table: self
                .position_table
                .as_ref()
                .map(|t| f("text.position_table", t))
                .transpose()?,
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&format!("text.blocks.{i}"), &mut f))
                .collect::<Result<_>>()?,
            ln_final_gain: f("text.ln_final_gain", &self.ln_final_gain)?,
            ln_final_bias: f("text.ln_final_bias", &self.ln_final_bias)?,
            projection: f("text.projection", &self.projection)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageParams<T> {
    pub patch_weight: T,
    pub patch_bias: T,
    pub position_table: T,
    pub blocks: Vec<BlockParams<T>>,
    pub ln_final_gain: T,
    pub ln_final_bias: T,
    pub projection: T,
}

impl<T> ImageParams<T> {
    /// Every slot with its name, in declaration order.
    pub fn slots(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.map(|name, t| {
            out.push((name.to_string(), t));
            Ok(())
        })
        .expect("collecting slots cannot fail");
        out
    }

    pub fn map<'a, U>(&'a self, mut f: impl FnMut(&str, &'a T) -> Result<U>) -> Result<ImageParams<U>> {
        Ok(ImageParams {
            patch_weight: f("image.patch_weight", &self.patch_weight)?,
            patch_bias: f("image.patch_bias", &self.patch_bias)?,
            position_table: f("image.position_table", &self.position_table)?,
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&format!("image.blocks.{i}"), &mut f))
                .collect::<Result<_>>()?,
            ln_final_gain: f("image.ln_final_gain", &self.ln_final_gain)?,
            ln_final_bias: f("image.ln_final_bias", &self.ln_final_bias)?,
            projection: f("image.projection", &self.projection)?,
        })
    }
}

pub type TextTensors = TextParams<Arc<Tensor>>;
pub type ImageTensors = ImageParams<Arc<Tensor>>;

struct Init<'a, R: Rng> {
    rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    fn weight(&mut self, shape: &[usize]) -> Arc<Tensor> {
        self.normal(shape, INIT_STD)
    }

    fn normal(&mut self, shape: &[usize], std: f64) -> Arc<Tensor> {
        Arc::new(Tensor::randn(shape, std, self.rng))
    }

    fn zeros(shape: &[usize]) -> Arc<Tensor> {
        Arc::new(Tensor::zeros(shape))
    }

    fn ones(shape: &[usize]) -> Arc<Tensor> {
        Arc::new(Tensor::ones(shape))
    }

    fn block(&mut self, d: usize, mlp: usize, cope: Option<(usize, usize)>) -> BlockParams<Arc<Tensor>> {
        BlockParams {
            ln1_gain: Self::ones(&[d]),
            ln1_bias: Self::zeros(&[d]),
            wq: self.weight(&[d, d]),
            bq: Self::zeros(&[d]),
            wk: self.weight(&[d, d]),
            bk: Self::zeros(&[d]),
            wv: self.weight(&[d, d]),
            bv: Self::zeros(&[d]),
            wo: self.weight(&[d, d]),
            bo: Self::zeros(&[d]),
            cope_table: cope.map(|(heads, p_max)| self.weight(&[heads, p_max + 1, d / heads])),
            ln2_gain: Self::ones(&[d]),
            ln2_bias: Self::zeros(&[d]),
            w1: self.weight(&[d, mlp]),
            b1: Self::zeros(&[mlp]),
            w2: self.weight(&[mlp, d]),
            b2: Self::zeros(&[d]),
        }
    }
}

fn cope_shape(config: &TextConfig) -> Option<(usize, usize)> {
    match config.scheme {
        PositionalScheme::Cope { p_max } => Some((config.n_heads, p_max)),
        _ => None,
    }
}

pub fn init_text<R: Rng>(config: &TextConfig, rng: &mut R) -> TextTensors {
    let d = config.d_model;
    let mut init = Init { rng };
    TextParams {
        token_embedding: init.weight(&[config.vocab_size, d]),
        position_table: matches!(config.scheme, PositionalScheme::Absolute)
            .then(|| init.normal(&[config.context, d], POSITION_INIT_STD)),
        blocks: (0..config.n_layers)
            .map(|_| init.block(d, config.mlp_dim(), cope_shape(config)))
            .collect(),
        ln_final_gain: Init::<R>::ones(&[d]),
        ln_final_bias: Init::<R>::zeros(&[d]),
        projection: init.weight(&[d, config.projection_dim]),
    }
}

pub fn init_image<R: Rng>(config: &ImageConfig, rng: &mut R) -> ImageTensors {
    let d = config.d_model;
    let mut init = Init { rng };
    ImageParams {
        patch_weight: init.weight(&[config.patch_dim(), d]),
        patch_bias: Init::<R>::zeros(&[d]),
        position_table: init.weight(&[config.n_patches(), d]),
        blocks: (0..config.n_layers).map(|_| init.block(d, config.mlp_dim(), None)).collect(),
        ln_final_gain: Init::<R>::ones(&[d]),
        ln_final_bias: Init::<R>::zeros(&[d]),
        projection: init.weight(&[d, config.projection_dim]),
    }
}

/// Per-block parameter count: two layer norms, four biased projections,
/// and the biased two-layer MLP.
fn block_count(d: usize, mlp: usize) -> usize {
    4 * d + 4 * (d * d + d) + (d * mlp + mlp) + (mlp * d + d)
}

/// Number of scalars in a text encoder, as a function of its configuration.
pub fn text_param_count(config: &TextConfig) -> usize {
    let d = config.d_model;
    let positions = match config.scheme {
        PositionalScheme::Absolute => config.context * d,
        _ => 0,
    };
    let cope = cope_shape(config).map_or(0, |(heads, p_max)| heads * (p_max + 1) * config.head_dim());
    config.vocab_size * d + positions + config.n_layers * (block_count(d, config.mlp_dim()) + cope) + 2 * d
        + d * config.projection_dim
}

pub fn image_param_count(config: &ImageConfig) -> usize {
    let d = config.d_model;
    config.patch_dim() * d + d + config.n_patches() * d + config.n_layers * block_count(d, config.mlp_dim()) + 2 * d
        + d * config.projection_dim
}
