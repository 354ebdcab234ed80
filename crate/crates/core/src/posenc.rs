//! Positional encodings: learned absolute tables, rotary (RoPE), NTK-aware
//! scaled rotary, and contextual (CoPE) positions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;
pub const DEFAULT_COPE_MAX_POSITION: usize = 64;
/// Window of the fixed-length teacher text encoder.
pub const TEACHER_WINDOW: usize = 77;

/// Per-pair angular frequencies `theta_j = base^(-2j/dim)` for a head of
/// dimension `dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct RotaryFrequencies {
    dim: usize,
    base: f64,
    theta: Vec<f64>,
    ntk_factor: f64,
}

impl RotaryFrequencies {
    pub fn new(dim: usize, base: f64) -> Result<Self> {
        if dim == 0 || !dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "rotary head dimension must be even and positive, got {dim}"
            )));
        }
        if !(base > 1.0) || !base.is_finite() {
            return Err(Error::Config(format!("rotary base must exceed 1, got {base}")));
        }
        Ok(Self::build(dim, base, 1.0))
    }

    fn build(dim: usize, base: f64, ntk_factor: f64) -> Self {
        let theta = (0..dim / 2)
            .map(|j| base.powf(-2.0 * j as f64 / dim as f64))
            .collect();
        RotaryFrequencies {
            dim,
            base,
            theta,
            ntk_factor,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    /// Accumulated NTK factor; 1.0 for unscaled frequencies.
    pub fn ntk_factor(&self) -> f64 {
        self.ntk_factor
    }

    /// `(cos, sin)` of `position * theta_j` for every pair.
    pub fn cos_sin(&self, position: usize) -> (Vec<f64>, Vec<f64>) {
        let m = position as f64;
        self.theta.iter().map(|t| ((m * t).cos(), (m * t).sin())).unzip()
    }
}

/// Rotates `v` in place pair-wise: `(v[2j], v[2j+1])` by the angle whose
/// cosine and sine are `cos[j]`, `sin[j]`.
#[inline]
pub(crate) fn rotate_pairs(v: &mut [f64], cos: &[f64], sin: &[f64]) {
    for (j, pair) in v.chunks_exact_mut(2).enumerate() {
        let (x, y) = (pair[0], pair[1]);
        pair[0] = x * cos[j] - y * sin[j];
        pair[1] = x * sin[j] + y * cos[j];
    }
}

/// Applies the rotary rotation for token position `position` to one head
/// vector.
pub fn rope_rotate(v: &[f64], position: usize, freqs: &RotaryFrequencies) -> Result<Vec<f64>> {
    if !v.len().is_multiple_of(2) {
        return Err(Error::Config(format!(
            "rotary rotation needs an even dimension, got {}",
            v.len()
        )));
    }
    if v.len() != freqs.dim {
        return Err(Error::dims("rope_rotate", &[v.len()], &[freqs.dim]));
    }
    let (cos, sin) = freqs.cos_sin(position);
    let mut out = v.to_vec();
    rotate_pairs(&mut out, &cos, &sin);
    Ok(out)
}

/// Frequency scale used when stretching the window from `t_f` to `t_g`
/// tokens: `alpha * t_g / t_f - (alpha - 1)`.
pub fn ntk_scale_factor(alpha: f64, t_f: usize, t_g: usize) -> Result<f64> {
    if t_f == 0 {
        return Err(Error::Contract("original window must be positive".into()));
    }
    if t_g < t_f {
        return Err(Error::Contract(format!(
            "target window {t_g} is shorter than original window {t_f}"
        )));
    }
    if !(alpha >= 1.0) {
        return Err(Error::Contract(format!("alpha must be >= 1, got {alpha}")));
    }
    Ok(alpha * (t_g as f64 / t_f as f64) - (alpha - 1.0))
}

/// NTK-aware rescaling: the base grows to `base * factor^(d/(d-2))`, which
/// keeps `theta_0 = 1` and stretches the low frequencies the most.
pub fn apply_ntk(freqs: &RotaryFrequencies, factor: f64) -> Result<RotaryFrequencies> {
    if freqs.dim <= 2 {
        return Err(Error::Config(format!(
            "NTK scaling needs head dimension > 2, got {}",
            freqs.dim
        )));
    }
    if !(factor >= 1.0) || !factor.is_finite() {
        return Err(Error::Contract(format!("NTK factor must be >= 1, got {factor}")));
    }
    if factor == 1.0 {
        return Ok(freqs.clone());
    }
    let d = freqs.dim as f64;
    let base = freqs.base * factor.powf(d / (d - 2.0));
    Ok(RotaryFrequencies::build(
        freqs.dim,
        base,
        freqs.ntk_factor * factor,
    ))
}

/// Row `position` of a learned absolute position table.
pub fn absolute_encode(position: usize, table: &Tensor) -> Result<Vec<f64>> {
    let (rows, _) = table.dims2()?;
    if position >= rows {
        return Err(Error::OutOfWindow {
            n: position + 1,
            window: rows,
        });
    }
    Ok(table.row(position).to_vec())
}

/// Contextual positions of every key as seen from the newest one.
#[derive(Clone, Debug, PartialEq)]
pub struct CopePositions {
    pub gates: Vec<f64>,
    /// Fractional positions, oldest key first, clamped to the table's range.
    pub positions: Vec<f64>,
    /// Interpolated position embedding for each key, `[keys, dim]`.
    pub embeddings: Tensor,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Linear interpolation between the two integer rows around `p`.
pub fn interpolate_position(table: &Tensor, p: f64) -> Result<Vec<f64>> {
    let (rows, cols) = table.dims2()?;
    let p = p.clamp(0.0, (rows - 1) as f64);
    let lo = p.floor() as usize;
    let hi = p.ceil() as usize;
    let w = p - lo as f64;
    let (a, b) = (table.row(lo), table.row(hi));
    Ok((0..cols).map(|j| a[j] * (1.0 - w) + b[j] * w).collect())
}

/// Gated cumulative positions for a query over causal `keys` (oldest row
/// first, the last row being the query's own position). Gates are
/// `sigmoid(scale * q·k_j)`; a key's position is the sum of the gates from
/// that key up to the newest, clamped to `table.rows() - 1`.
pub fn cope_positions(q: &[f64], keys: &Tensor, table: &Tensor, scale: f64) -> Result<CopePositions> {
    let (n, d) = keys.dims2()?;
    if d != q.len() {
        return Err(Error::dims("cope_positions", &[q.len()], keys.shape()));
    }
    let (rows, td) = table.dims2()?;
    if td != d {
        return Err(Error::dims("cope_positions", table.shape(), keys.shape()));
    }
    let p_max = (rows - 1) as f64;
    let gates: Vec<f64> = (0..n)
        .map(|j| {
            let dot: f64 = keys.row(j).iter().zip(q).map(|(k, q)| k * q).sum();
            sigmoid(scale * dot)
        })
        .collect();
    let mut positions = vec![0.0; n];
    let mut acc = 0.0;
    for j in (0..n).rev() {
        acc += gates[j];
        positions[j] = acc.min(p_max);
    }
    let mut emb = Vec::with_capacity(n * d);
    for &p in &positions {
        emb.extend(interpolate_position(table, p)?);
    }
    Ok(CopePositions {
        gates,
        positions,
        embeddings: Tensor::new(vec![n, d], emb)?,
    })
}

/// Name of a positional scheme as used in configuration files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    Absolute,
    Rope,
    RopeNtk,
    Cope,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 4] = [
        SchemeKind::Absolute,
        SchemeKind::Rope,
        SchemeKind::RopeNtk,
        SchemeKind::Cope,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SchemeKind::Absolute => "absolute",
            SchemeKind::Rope => "rope",
            SchemeKind::RopeNtk => "rope_ntk",
            SchemeKind::Cope => "cope",
        }
    }

    pub fn is_rotary(self) -> bool {
        matches!(self, SchemeKind::Rope | SchemeKind::RopeNtk)
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SchemeKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown positional scheme `{s}`")))
    }
}

/// How a text encoder injects positions. The context window itself lives in
/// the encoder configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PositionalScheme {
    /// Learned table with one row per position of the window.
    Absolute,
    Rope {
        base: f64,
    },
    /// Rotary frequencies rescaled for a window stretched from
    /// `original_window` tokens to the encoder's context length.
    RopeNtk {
        base: f64,
        alpha: f64,
        original_window: usize,
    },
    Cope {
        p_max: usize,
    },
}

impl PositionalScheme {
    pub fn kind(&self) -> SchemeKind {
        match self {
            PositionalScheme::Absolute => SchemeKind::Absolute,
            PositionalScheme::Rope { .. } => SchemeKind::Rope,
            PositionalScheme::RopeNtk { .. } => SchemeKind::RopeNtk,
            PositionalScheme::Cope { .. } => SchemeKind::Cope,
        }
    }

    /// Default parameters for a scheme kind.
    pub fn default_for(kind: SchemeKind, alpha: f64) -> Self {
        match kind {
            SchemeKind::Absolute => PositionalScheme::Absolute,
            SchemeKind::Rope => PositionalScheme::Rope {
                base: DEFAULT_ROPE_BASE,
            },
            SchemeKind::RopeNtk => PositionalScheme::RopeNtk {
                base: DEFAULT_ROPE_BASE,
                alpha,
                original_window: TEACHER_WINDOW,
            },
            SchemeKind::Cope => PositionalScheme::Cope {
                p_max: DEFAULT_COPE_MAX_POSITION,
            },
        }
    }

    /// Rotary frequencies for rotary schemes, with NTK scaling applied for a
    /// window of `context` tokens.
    pub fn frequencies(&self, head_dim: usize, context: usize) -> Result<Option<RotaryFrequencies>> {
        match *self {
            PositionalScheme::Rope { base } => Ok(Some(RotaryFrequencies::new(head_dim, base)?)),
            PositionalScheme::RopeNtk {
                base,
                alpha,
                original_window,
            } => {
                let freqs = RotaryFrequencies::new(head_dim, base)?;
                let factor = ntk_scale_factor(alpha, original_window, context)?;
                Ok(Some(apply_ntk(&freqs, factor)?))
            }
            _ => Ok(None),
        }
    }
}
