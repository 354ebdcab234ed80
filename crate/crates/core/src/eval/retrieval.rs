use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{make_batch, ImageCaptionPair};
use crate::encoder::{DualEncoder, SequenceEmbedding};
use crate::error::{Error, Result};
use crate::posenc::TEACHER_WINDOW;
use crate::tensor::Tensor;

/// Slack allowed on the cosine range check.
const RANGE_SLACK: f64 = 1e-9;

/// Cosine similarities, one row per caption and one column per image.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    values: Tensor,
    pub text_ids: Vec<String>,
    pub image_ids: Vec<String>,
}

impl SimilarityMatrix {
    pub fn new(values: Tensor, text_ids: Vec<String>, image_ids: Vec<String>) -> Result<Self> {
        let (rows, cols) = values.dims2()?;
        if rows != text_ids.len() || cols != image_ids.len() {
            return Err(Error::dims("SimilarityMatrix", &[rows, cols], &[text_ids.len(), image_ids.len()]));
        }
        if let Some(v) = values.data().iter().find(|v| !(v.abs() <= 1.0 + RANGE_SLACK)) {
            return Err(Error::Contract(format!("similarity {v} outside [-1, 1]")));
        }
        Ok(SimilarityMatrix {
            values,
            text_ids,
            image_ids,
        })
    }

    /// Matrix with positional ids `0..n`.
    pub fn from_values(values: Tensor) -> Result<Self> {
        let (rows, cols) = values.dims2()?;
        let ids = |n: usize| (0..n).map(|i| i.to_string()).collect();
        Self::new(values, ids(rows), ids(cols))
    }

    pub fn from_embeddings(text: &[SequenceEmbedding], image: &[SequenceEmbedding], ids: &[String]) -> Result<Self> {
        if text.len() != ids.len() || image.len() != ids.len() {
            return Err(Error::dims("SimilarityMatrix", &[text.len(), image.len()], &[ids.len()]));
        }
        let mut data = Vec::with_capacity(text.len() * image.len());
        for t in text {
            for i in image {
                data.push(t.cosine(i).clamp(-1.0, 1.0));
            }
        }
        Self::new(Tensor::new(vec![text.len(), image.len()], data)?, ids.to_vec(), ids.to_vec())
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn get(&self, text: usize, image: usize) -> f64 {
        self.values.data()[text * self.image_ids.len() + image]
    }

    pub fn size(&self) -> (usize, usize) {
        (self.text_ids.len(), self.image_ids.len())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Image queries ranked over captions.
    Img2Txt,
    /// Caption queries ranked over images.
    Txt2Img,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::Img2Txt, Direction::Txt2Img];

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Img2Txt => "img2txt",
            Direction::Txt2Img => "txt2img",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Direction::BOTH
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown retrieval direction `{s}`")))
    }
}

/// Recall (percent) at one cutoff.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecallAtK {
    pub k: usize,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub recalls: Vec<RecallAtK>,
}

impl RetrievalReport {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.recalls.iter().find(|r| r.k == k).map(|r| r.recall)
    }
}

/// Zero-based rank of the true match among `scores`: candidates scoring
/// strictly higher come first, and ties go to the lower index.
pub fn rank_of(scores: impl Iterator<Item = f64> + Clone, truth: usize) -> usize {
    let s_true = scores.clone().nth(truth).expect("truth index inside the candidate list");
    scores
        .enumerate()
        .filter(|&(j, s)| s > s_true || (s == s_true && j < truth))
        .count()
}

/// Percentage of queries whose diagonal match ranks within each `k`.
pub fn recall_at_k(sim: &SimilarityMatrix, ks: &[usize], direction: Direction) -> Result<RetrievalReport> {
    let (rows, cols) = sim.size();
    if rows != cols {
        return Err(Error::dims("recall_at_k", &[rows, cols], &[rows, rows]));
    }
    let b = rows;
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > b) {
        return Err(Error::Contract(format!("recall cutoff {k} outside 1..={b}")));
    }
    let ranks: Vec<usize> = (0..b)
        .map(|q| match direction {
            Direction::Txt2Img => rank_of((0..b).map(|j| sim.get(q, j)), q),
            Direction::Img2Txt => rank_of((0..b).map(|j| sim.get(j, q)), q),
        })
        .collect();
    let recalls = ks
        .iter()
        .map(|&k| RecallAtK {
            k,
            recall: 100.0 * ranks.iter().filter(|&&r| r < k).count() as f64 / b as f64,
        })
        .collect();
    Ok(RetrievalReport { direction, recalls })
}

/// Embeds every caption (its long view, capped at the model's window) and
/// every image of `pairs`.
pub fn similarity_for_pairs(model: &DualEncoder, pairs: &[ImageCaptionPair], t_g: usize) -> Result<SimilarityMatrix> {
    let refs: Vec<&ImageCaptionPair> = pairs.iter().collect();
    let window = t_g.min(model.text_config.context);
    let batch = make_batch(&refs, TEACHER_WINDOW.min(window), window)?;
    let text = batch
        .long_view
        .iter()
        .map(|t| model.encode_text(t))
        .collect::<Result<Vec<_>>>()?;
    let image = batch
        .images
        .iter()
        .map(|i| model.encode_image(i))
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<String> = pairs.iter().map(|p| p.id.clone()).collect();
    SimilarityMatrix::from_embeddings(&text, &image, &ids)
}

/// Both retrieval directions for `pairs`.
pub fn evaluate_retrieval(
    model: &DualEncoder,
    pairs: &[ImageCaptionPair],
    ks: &[usize],
    t_g: usize,
) -> Result<Vec<RetrievalReport>> {
    let sim = similarity_for_pairs(model, pairs, t_g)?;
    Direction::BOTH.iter().map(|&d| recall_at_k(&sim, ks, d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: &[Vec<f64>]) -> SimilarityMatrix {
        SimilarityMatrix::from_values(Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn identity_is_perfect() {
        let sim = SimilarityMatrix::from_values(Tensor::identity(5)).unwrap();
        for d in Direction::BOTH {
            assert_eq!(recall_at_k(&sim, &[1], d).unwrap().at(1), Some(100.0));
        }
    }

    #[test]
    fn near_miss_is_found_at_two() {
        let sim = matrix(&[vec![0.2, 0.9, 0.1], vec![0.0, 0.8, 0.1], vec![0.1, 0.2, 0.7]]);
        let r = recall_at_k(&sim, &[1, 2, 3], Direction::Txt2Img).unwrap();
        assert!((r.at(1).unwrap() - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.at(2), Some(100.0));
        assert_eq!(rank_of([0.2, 0.9, 0.1].into_iter(), 0), 1);
    }

    #[test]
    fn anti_diagonal_never_hits_first() {
        for b in 2..6 {
            let rows: Vec<Vec<f64>> = (0..b)
                .map(|i| (0..b).map(|j| if i + j == b - 1 { 1.0 } else { 0.0 }).collect())
                .collect();
            let sim = matrix(&rows);
            let odd_centre = b % 2 == 1;
            for d in Direction::BOTH {
                let r1 = recall_at_k(&sim, &[1], d).unwrap().at(1).unwrap();
                // With odd B the centre element is on both diagonals.
                let expected = if odd_centre { 100.0 / b as f64 } else { 0.0 };
                assert!((r1 - expected).abs() < 1e-12, "B={b}");
            }
        }
    }

    #[test]
    fn ties_go_to_the_lower_index() {
        let sim = matrix(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        let r = recall_at_k(&sim, &[1, 2], Direction::Txt2Img).unwrap();
        assert_eq!(r.at(1), Some(50.0));
        assert_eq!(r.at(2), Some(100.0));
    }

    #[test]
    fn cutoff_and_shape_contracts() {
        let sim = SimilarityMatrix::from_values(Tensor::identity(3)).unwrap();
        assert!(matches!(recall_at_k(&sim, &[4], Direction::Img2Txt), Err(Error::Contract(_))));
        assert!(recall_at_k(&sim, &[0], Direction::Img2Txt).is_err());
        let rect = SimilarityMatrix::from_values(Tensor::zeros(&[2, 3])).unwrap();
        assert!(recall_at_k(&rect, &[1], Direction::Img2Txt).is_err());
        assert!(SimilarityMatrix::from_values(Tensor::full(&[2, 2], 1.5)).is_err());
    }
}
