//! Checkpoint files: one line of JSON header, then every tensor as
//! little-endian `f64` values in the order the header lists them.

use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ImageConfig, TextConfig};
use super::model::DualEncoder;
use super::params::{init_image, init_text};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const TEMPERATURE_SLOT: &str = "temperature";

/// Which pipeline stage produced a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Teacher,
    Distilled,
    Expanded,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Teacher => "teacher",
            Phase::Distilled => "distilled",
            Phase::Expanded => "expanded",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    phase: Phase,
    seed: u64,
    text: TextConfig,
    image: ImageConfig,
    tensors: Vec<TensorEntry>,
}

/// A model together with the stage that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub phase: Phase,
    pub model: DualEncoder,
}

impl Checkpoint {
    pub fn new(phase: Phase, model: DualEncoder) -> Self {
        Checkpoint { phase, model }
    }

    pub fn require_phase(&self, expected: Phase) -> Result<()> {
        if self.phase != expected {
            return Err(Error::PhaseMismatch {
                expected: expected.to_string(),
                found: self.phase.to_string(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.model;
        let temperature = Arc::new(Tensor::vector(vec![m.temperature]));
        let mut slots = m.text.slots();
        slots.extend(m.image.slots());
        slots.push((TEMPERATURE_SLOT.to_string(), &temperature));
        let header = Header {
            format_version: FORMAT_VERSION,
            phase: self.phase,
            seed: m.seed,
            text: m.text_config.clone(),
            image: m.image_config.clone(),
            tensors: slots
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let mut bytes = serde_json::to_vec(&header).expect("headers always serialize");
        bytes.push(b'\n');
        for (_, t) in &slots {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
        let header: Header =
            serde_json::from_slice(&bytes[..split]).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        header.text.validate()?;
        header.image.validate()?;
        let mut payload = &bytes[split + 1..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            let len: usize = entry.shape.iter().product();
            if payload.len() < len * 8 {
                return Err(Error::Checkpoint(format!("payload ends inside `{}`", entry.name)));
            }
            let (head, rest) = payload.split_at(len * 8);
            payload = rest;
            let data = head
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((entry, Tensor::new(entry.shape.clone(), data)?));
        }
        if !payload.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing payload bytes", payload.len())));
        }

        // Build a skeleton of the right structure, then fill it slot by slot,
        // checking that names and shapes line up with the configuration.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let text_skeleton = init_text(&header.text, &mut rng);
        let image_skeleton = init_image(&header.image, &mut rng);
        let mut values = tensors.into_iter();
        let mut fill = |name: &str, expected: &Arc<Tensor>| -> Result<Arc<Tensor>> {
            let (entry, t) = values
                .next()
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if entry.name != name || t.shape() != expected.shape() {
                return Err(Error::Checkpoint(format!(
                    "expected `{name}` {:?}, found `{}` {:?}",
                    expected.shape(),
                    entry.name,
                    t.shape()
                )));
            }
            Ok(Arc::new(t))
        };
        let text = text_skeleton.map(&mut fill)?;
        let image = image_skeleton.map(&mut fill)?;
        let temperature = fill(TEMPERATURE_SLOT, &Arc::new(Tensor::vector(vec![0.0])))?.data()[0];
        if values.next().is_some() {
            return Err(Error::Checkpoint("unexpected extra tensors".into()));
        }
        Ok(Checkpoint {
            phase: header.phase,
            model: DualEncoder {
                text_config: header.text,
                image_config: header.image,
                text,
                image,
                temperature,
                seed: header.seed,
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
