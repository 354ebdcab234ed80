//! Procedural image/caption pairs whose discriminating content sits at a
//! controlled token offset.
//!
//! Each 16×16 image is split into four 8×8 quadrants; a quadrant holds at
//! most one primitive (a shape drawn at one of two intensities). The caption
//! describes the primitives clause by clause, so retrieving the right image
//! requires reading the clauses that differ between pairs.
//!
//! * Long captions describe all four quadrants and always exceed the 77-token
//!   teacher window; short captions describe two quadrants and always fit it.
//! * `early` long captions list the quadrants in random order, so the first
//!   clause already discriminates.
//! * `late` long captions open with two quadrants whose content is the same
//!   for every late pair, plus a fixed connective, so the first varying token
//!   sits past the window; only the bottom quadrants vary.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{Image, ImageCaptionPair, PairMetadata, Primitive};
use super::tokenizer::tokenize;
use crate::error::{Error, Result};
use crate::posenc::TEACHER_WINDOW;

pub const IMAGE_SIDE: usize = 16;
const CELL: usize = IMAGE_SIDE / 2;

/// Quadrant names with their top-left pixel corner.
pub const QUADRANTS: [(&str, usize, usize); 4] = [
    ("top left", 0, 0),
    ("top right", CELL, 0),
    ("bottom left", 0, CELL),
    ("bottom right", CELL, CELL),
];
pub const SHAPES: [&str; 4] = ["cross", "ring", "dot", "bar"];
pub const BRIGHTNESS: [(&str, f32); 2] = [("dim", 0.5), ("bright", 1.0)];

/// Content of the two quadrants shared by every late caption.
const LATE_FIXED: [(usize, &str, &str); 2] = [(0, "cross", "bright"), (1, "ring", "dim")];
/// Connective between the shared and the varying clauses; long enough to push
/// the first varying token past the teacher window.
const LATE_CONNECTIVE: &str = "below that, ";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttrOffset {
    Early,
    Late,
    Mixed,
}

impl AttrOffset {
    pub fn as_str(self) -> &'static str {
        match self {
            AttrOffset::Early => "early",
            AttrOffset::Late => "late",
            AttrOffset::Mixed => "mixed",
        }
    }
}

impl std::str::FromStr for AttrOffset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "early" => Ok(AttrOffset::Early),
            "late" => Ok(AttrOffset::Late),
            "mixed" => Ok(AttrOffset::Mixed),
            other => Err(Error::Config(format!(
                "unknown attribute offset `{other}` (expected early, late, or mixed)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub count: usize,
    /// Probability that a pair gets a four-quadrant (long) caption.
    pub long_fraction: f64,
    pub attr_offset: AttrOffset,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            count: 2000,
            long_fraction: 0.5,
            attr_offset: AttrOffset::Mixed,
        }
    }
}

fn cell_mask(shape: &str, x: usize, y: usize) -> bool {
    match shape {
        "cross" => ((3..5).contains(&x) && (1..7).contains(&y)) || ((3..5).contains(&y) && (1..7).contains(&x)),
        "ring" => {
            let inside = (1..7).contains(&x) && (1..7).contains(&y);
            inside && (x == 1 || x == 6 || y == 1 || y == 6)
        }
        "dot" => (2..6).contains(&x) && (2..6).contains(&y),
        "bar" => (3..6).contains(&y) && (1..7).contains(&x),
        _ => false,
    }
}

fn quadrant_corner(name: &str) -> Option<(usize, usize)> {
    QUADRANTS.iter().find(|q| q.0 == name).map(|q| (q.1, q.2))
}

fn intensity(name: &str) -> Option<f32> {
    BRIGHTNESS.iter().find(|b| b.0 == name).map(|b| b.1)
}

/// Draws primitives onto a blank 16×16 canvas.
pub fn render_primitives(primitives: &[Primitive]) -> Result<Image> {
    let mut image = Image::blank(IMAGE_SIDE, IMAGE_SIDE);
    for p in primitives {
        let (x0, y0) = quadrant_corner(&p.quadrant)
            .ok_or_else(|| Error::Contract(format!("unknown quadrant `{}`", p.quadrant)))?;
        let level = intensity(&p.brightness)
            .ok_or_else(|| Error::Contract(format!("unknown brightness `{}`", p.brightness)))?;
        if !SHAPES.contains(&p.shape.as_str()) {
            return Err(Error::Contract(format!("unknown shape `{}`", p.shape)));
        }
        for y in 0..CELL {
            for x in 0..CELL {
                if cell_mask(&p.shape, x, y) {
                    image.set(x0 + x, y0 + y, level);
                }
            }
        }
    }
    Ok(image)
}

fn clause_head(p: &Primitive) -> String {
    format!("{} has a ", p.quadrant)
}

fn attribute(p: &Primitive) -> String {
    format!("{} {}", p.brightness, p.shape)
}

fn random_primitive(quadrant: usize, rng: &mut ChaCha8Rng) -> Primitive {
    primitive(
        quadrant,
        SHAPES[rng.gen_range(0..SHAPES.len())],
        BRIGHTNESS[rng.gen_range(0..BRIGHTNESS.len())].0,
    )
}

fn primitive(quadrant: usize, shape: &str, brightness: &str) -> Primitive {
    Primitive {
        quadrant: QUADRANTS[quadrant].0.to_string(),
        shape: shape.to_string(),
        brightness: brightness.to_string(),
    }
}

/// Builds the caption and locates the attribute of clause `attr_clause`.
/// Returns (caption, token index of that attribute, attribute text).
fn compose(primitives: &[Primitive], connective_before: Option<usize>, attr_clause: usize) -> (String, usize, String) {
    let mut caption = String::new();
    let mut attr_byte = 0;
    for (i, p) in primitives.iter().enumerate() {
        if i > 0 {
            caption.push(' ');
        }
        if connective_before == Some(i) {
            caption.push_str(LATE_CONNECTIVE);
        }
        caption.push_str(&clause_head(p));
        if i == attr_clause {
            attr_byte = caption.len();
        }
        caption.push_str(&attribute(p));
        caption.push('.');
    }
    // BOS occupies token 0, so byte b sits at token b + 1.
    (caption, attr_byte + 1, attribute(&primitives[attr_clause]))
}

/// Deterministically generates `count` pairs from `seed`.
pub fn generate_synthetic_corpus(config: &SynthConfig) -> Result<Vec<ImageCaptionPair>> {
    if config.count == 0 {
        return Err(Error::Contract("corpus size must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&config.long_fraction) {
        return Err(Error::Contract(format!(
            "long_fraction must lie in [0, 1], got {}",
            config.long_fraction
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut pairs = Vec::with_capacity(config.count);
    for index in 0..config.count {
        let long = rng.gen_bool(config.long_fraction);
        let late = long
            && match config.attr_offset {
                AttrOffset::Early => false,
                AttrOffset::Late => true,
                AttrOffset::Mixed => rng.gen_bool(0.5),
            };
        let (primitives, connective, attr_clause) = if late {
            let mut ps: Vec<Primitive> = LATE_FIXED.iter().map(|&(q, s, b)| primitive(q, s, b)).collect();
            ps.push(random_primitive(2, &mut rng));
            ps.push(random_primitive(3, &mut rng));
            (ps, Some(2), 2)
        } else {
            let mut quadrants: Vec<usize> = (0..QUADRANTS.len()).collect();
            quadrants.shuffle(&mut rng);
            quadrants.truncate(if long { 4 } else { 2 });
            let ps = quadrants.into_iter().map(|q| random_primitive(q, &mut rng)).collect();
            (ps, None, 0)
        };
        let (caption, attr_token, attr_text) = compose(&primitives, connective, attr_clause);
        debug_assert!(!late || attr_token >= TEACHER_WINDOW);
        let image = render_primitives(&primitives)?;
        pairs.push(ImageCaptionPair {
            id: format!("s{}-{index:06}", config.seed),
            caption,
            image,
            metadata: PairMetadata {
                attr_offset: if late { "late" } else { "early" }.to_string(),
                attr_token,
                attr_text,
                primitives,
            },
        });
    }
    Ok(pairs)
}

/// Number of tokens in a caption, including BOS and EOS.
pub fn caption_tokens(pair: &ImageCaptionPair) -> usize {
    tokenize(&pair.caption).len()
}
