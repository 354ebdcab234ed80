use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Single-channel image with values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::dims("Image::new", &[height, width], &[pixels.len()]));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Contract(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Image { width, height, pixels })
    }

    pub fn blank(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.pixels[y * self.width + x] = v;
    }
}

/// One drawn primitive, as named in the caption.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Primitive {
    pub quadrant: String,
    pub shape: String,
    pub brightness: String,
}

/// Generator bookkeeping carried alongside each pair.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairMetadata {
    /// `early` or `late`: where the first discriminating attribute sits.
    #[serde(default)]
    pub attr_offset: String,
    /// Token index (BOS = 0) where the first discriminating attribute starts.
    #[serde(default)]
    pub attr_token: usize,
    /// Caption text found at `attr_token`.
    #[serde(default)]
    pub attr_text: String,
    #[serde(default)]
    pub primitives: Vec<Primitive>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageCaptionPair {
    pub id: String,
    pub caption: String,
    pub image: Image,
    pub metadata: PairMetadata,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    caption: String,
    image: String,
    width: usize,
    height: usize,
    #[serde(default)]
    metadata: PairMetadata,
}

fn encode_pixels(pixels: &[f32]) -> String {
    let bytes: Vec<u8> = pixels.iter().flat_map(|p| p.to_le_bytes()).collect();
    B64.encode(bytes)
}

fn decode_pixels(text: &str) -> std::result::Result<Vec<f32>, String> {
    let bytes = B64.decode(text).map_err(|e| format!("image payload: {e}"))?;
    if bytes.len() % 4 != 0 {
        return Err(format!("image payload of {} bytes is not a float array", bytes.len()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Writes one JSON record per line.
pub fn save_corpus(path: impl AsRef<Path>, pairs: &[ImageCaptionPair]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for pair in pairs {
        let record = Record {
            id: pair.id.clone(),
            caption: pair.caption.clone(),
            image: encode_pixels(&pair.image.pixels),
            width: pair.image.width,
            height: pair.image.height,
            metadata: pair.metadata.clone(),
        };
        let line = serde_json::to_string(&record).expect("records always serialize");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<ImageCaptionPair>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        pairs.push(parse_record(&line).map_err(|msg| Error::Parse { line: i + 1, msg })?);
    }
    Ok(pairs)
}

fn parse_record(line: &str) -> std::result::Result<ImageCaptionPair, String> {
    let record: Record = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if record.caption.is_empty() {
        return Err("empty caption".into());
    }
    let pixels = decode_pixels(&record.image)?;
    let image = Image::new(record.width, record.height, pixels).map_err(|e| e.to_string())?;
    Ok(ImageCaptionPair {
        id: record.id,
        caption: record.caption,
        image,
        metadata: record.metadata,
    })
}
