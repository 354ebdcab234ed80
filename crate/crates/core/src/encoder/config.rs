use serde::{Deserialize, Serialize};

use crate::data::{IMAGE_SIDE, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::posenc::{PositionalScheme, SchemeKind, DEFAULT_ROPE_BASE, TEACHER_WINDOW};

/// Shape of the causal text transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Longest accepted sequence. For the absolute scheme this is also the
    /// number of rows of the position table.
    pub context: usize,
    pub scheme: PositionalScheme,
    pub projection_dim: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig {
            vocab_size: VOCAB_SIZE,
            d_model: 64,
            n_heads: 4,
            n_layers: 4,
            context: TEACHER_WINDOW,
            scheme: PositionalScheme::Absolute,
            projection_dim: 64,
        }
    }
}

impl TextConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn mlp_dim(&self) -> usize {
        MLP_RATIO * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        check_heads(self.d_model, self.n_heads)?;
        if self.vocab_size == 0 || self.n_layers == 0 || self.projection_dim == 0 || self.context == 0 {
            return Err(Error::Config("text encoder sizes must be positive".into()));
        }
        if self.scheme.kind().is_rotary() && !self.head_dim().is_multiple_of(2) {
            return Err(Error::Config(format!(
                "rotary schemes need an even head dimension, got {}",
                self.head_dim()
            )));
        }
        match self.scheme {
            PositionalScheme::Rope { base } | PositionalScheme::RopeNtk { base, .. } if base <= 1.0 => {
                Err(Error::Config(format!("rotary base must exceed 1, got {base}")))
            }
            PositionalScheme::RopeNtk { original_window, .. } if self.context < original_window => Err(Error::Config(
                format!("context {} is below the original window {original_window}", self.context),
            )),
            PositionalScheme::Cope { p_max: 0 } => Err(Error::Config("CoPE needs p_max >= 1".into())),
            _ => Ok(()),
        }
    }

    /// Same dimensions under another positional scheme and window.
    pub fn with_scheme(&self, scheme: PositionalScheme, context: usize) -> Self {
        TextConfig {
            scheme,
            context,
            ..self.clone()
        }
    }

    /// The configuration of a student derived from an absolute teacher.
    pub fn rope_student(&self) -> Self {
        self.with_scheme(PositionalScheme::Rope { base: DEFAULT_ROPE_BASE }, self.context)
    }

    pub fn scheme_kind(&self) -> SchemeKind {
        self.scheme.kind()
    }
}

/// Shape of the patch-embedding image transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub projection_dim: usize,
}

impl Default for ImageConfig {
    fn default() -> Self {
        ImageConfig {
            image_size: IMAGE_SIDE,
            patch_size: 4,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            projection_dim: 64,
        }
    }
}

impl ImageConfig {
    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn mlp_dim(&self) -> usize {
        MLP_RATIO * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        check_heads(self.d_model, self.n_heads)?;
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.n_layers == 0 || self.projection_dim == 0 {
            return Err(Error::Config("image encoder sizes must be positive".into()));
        }
        Ok(())
    }
}

pub const MLP_RATIO: usize = 4;

fn check_heads(d_model: usize, n_heads: usize) -> Result<()> {
    if n_heads == 0 || d_model == 0 || !d_model.is_multiple_of(n_heads) {
        return Err(Error::Config(format!(
            "d_model {d_model} is not divisible by {n_heads} heads"
        )));
    }
    Ok(())
}
