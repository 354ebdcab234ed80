use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::corpus::{Image, ImageCaptionPair};
use super::tokenizer::{tokenize, truncate, TokenSequence};
use crate::error::{Error, Result};

/// Images with a long (≤ `t_g`) and a short (≤ `t_f`) view of each caption.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Vec<Image>,
    pub long_view: Vec<TokenSequence>,
    pub short_view: Vec<TokenSequence>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Tokenizes the captions; the short view is the long view capped at `t_f`.
pub fn make_batch(pairs: &[&ImageCaptionPair], t_f: usize, t_g: usize) -> Result<Batch> {
    if t_g < t_f {
        return Err(Error::Contract(format!("long window {t_g} is shorter than short window {t_f}")));
    }
    let mut batch = Batch {
        images: Vec::with_capacity(pairs.len()),
        long_view: Vec::with_capacity(pairs.len()),
        short_view: Vec::with_capacity(pairs.len()),
    };
    for pair in pairs {
        let full = tokenize(&pair.caption);
        if full.len() > t_g {
            log::warn!("caption `{}` has {} tokens; long view truncated to {t_g}", pair.id, full.len());
        }
        let long = truncate(&full, t_g)?;
        batch.short_view.push(truncate(&long, t_f)?);
        batch.long_view.push(long);
        batch.images.push(pair.image.clone());
    }
    Ok(batch)
}

/// Shuffled mini-batch index lists for one epoch; a pure function of
/// `(count, batch_size, seed, epoch)`. The last batch may be short.
pub fn batch_indices(count: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Contract("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..count).collect();
    let stream = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ epoch as u64;
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
