use crate::data::{tokenize, ImageCaptionPair, TokenSequence, BOS, EOS};
use crate::encoder::DualEncoder;
use crate::error::{Error, Result};
use crate::posenc::TEACHER_WINDOW;

/// Where the aggregation token's attention goes.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSpread {
    /// Attention weight on each position, averaged over heads.
    pub weights: Vec<f64>,
    /// Shannon entropy of `weights`, in nats.
    pub entropy: f64,
    /// Total weight on positions past the 77-token window (1-based 78 on).
    pub mass_beyond_window: f64,
}

/// Entropy in nats, treating `0 · ln 0` as 0.
pub fn entropy(row: &[f64]) -> f64 {
    -row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// Weight on 1-based positions strictly greater than `window`.
pub fn mass_beyond(row: &[f64], window: usize) -> f64 {
    row.iter().skip(window).sum()
}

impl AttentionSpread {
    pub fn from_weights(weights: Vec<f64>) -> Self {
        AttentionSpread {
            entropy: entropy(&weights),
            mass_beyond_window: mass_beyond(&weights, TEACHER_WINDOW),
            weights,
        }
    }
}

/// Head-averaged attention of the aggregation token in `layer` (default:
/// the last layer).
pub fn attention_spread(model: &DualEncoder, tokens: &TokenSequence, layer: Option<usize>) -> Result<AttentionSpread> {
    let c = &model.text_config;
    let layer = layer.unwrap_or(c.n_layers - 1);
    let mut weights = vec![0.0; tokens.len()];
    for head in 0..c.n_heads {
        let row = model.extract_attention(tokens, layer, head)?;
        weights.iter_mut().zip(row).for_each(|(w, r)| *w += r / c.n_heads as f64);
    }
    Ok(AttentionSpread::from_weights(weights))
}

/// Window sizes and strides of the sliding relevance analysis.
pub const RELEVANCE_WINDOWS: [(usize, usize); 3] = [(20, 5), (33, 10), (55, 15)];

/// Caption-to-image similarity of every window of one size and stride.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceGrid {
    pub window_size: usize,
    pub stride: usize,
    /// `(start, end)` offsets into the caption's content tokens, end exclusive.
    pub offsets: Vec<(usize, usize)>,
    pub cosines: Vec<f64>,
}

/// Window offsets over `n` content tokens. A caption shorter than the
/// window yields a single window covering all of it.
pub fn window_offsets(n: usize, size: usize, stride: usize) -> Result<Vec<(usize, usize)>> {
    if size == 0 || stride == 0 {
        return Err(Error::Contract("window size and stride must be positive".into()));
    }
    if n <= size {
        return Ok(vec![(0, n)]);
    }
    Ok((0..=(n - size) / stride).map(|w| (w * stride, w * stride + size)).collect())
}

/// Cosine similarity between the image and each caption window; every
/// window is encoded as its own caption (BOS, window tokens, EOS).
pub fn relevance_distribution(
    model: &DualEncoder,
    pair: &ImageCaptionPair,
    sizes: &[usize],
    strides: &[usize],
) -> Result<Vec<RelevanceGrid>> {
    if sizes.len() != strides.len() {
        return Err(Error::Contract(format!(
            "{} window sizes but {} strides",
            sizes.len(),
            strides.len()
        )));
    }
    let ids = tokenize(&pair.caption);
    let content = &ids.ids()[1..ids.len() - 1];
    let image = model.encode_image(&pair.image)?;
    sizes
        .iter()
        .zip(strides)
        .map(|(&size, &stride)| {
            let offsets = window_offsets(content.len(), size, stride)?;
            let cosines = offsets
                .iter()
                .map(|&(s, e)| {
                    let mut w = Vec::with_capacity(e - s + 2);
                    w.push(BOS);
                    w.extend_from_slice(&content[s..e]);
                    w.push(EOS);
                    let emb = model.encode_text(&TokenSequence::new(w)?)?;
                    Ok(emb.cosine(&image).clamp(-1.0, 1.0))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(RelevanceGrid {
                window_size: size,
                stride,
                offsets,
                cosines,
            })
        })
        .collect()
}
