use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

/// How the student's embedding is pulled towards the teacher's.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillKind {
    /// `1 − cos(z_t, z_s)`.
    Cosine,
    /// `‖z_t − z_s‖₂`.
    L2,
    /// Mean squared difference.
    Mse,
}

impl DistillKind {
    pub const ALL: [DistillKind; 3] = [DistillKind::Cosine, DistillKind::L2, DistillKind::Mse];

    pub fn as_str(self) -> &'static str {
        match self {
            DistillKind::Cosine => "cosine",
            DistillKind::L2 => "l2",
            DistillKind::Mse => "mse",
        }
    }
}

impl fmt::Display for DistillKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DistillKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DistillKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown distillation loss `{s}`")))
    }
}

fn one_like(tape: &mut GradTape, v: Var) -> Var {
    let shape = tape.shape(v).to_vec();
    tape.constant(Tensor::ones(&shape))
}

/// Distillation loss between teacher and student embeddings of equal shape.
pub fn distill_loss(tape: &mut GradTape, z_t: Var, z_s: Var, kind: DistillKind) -> Result<Var> {
    if tape.shape(z_t) != tape.shape(z_s) {
        return Err(Error::dims("distill_loss", tape.shape(z_t), tape.shape(z_s)));
    }
    match kind {
        DistillKind::Cosine => {
            let a = tape.l2_normalize_rows(z_t)?;
            let b = tape.l2_normalize_rows(z_s)?;
            let p = tape.mul(a, b)?;
            let cos = tape.sum(p)?;
            let one = one_like(tape, cos);
            tape.sub(one, cos)
        }
        DistillKind::L2 => {
            let d = tape.sub(z_t, z_s)?;
            let sq = tape.square(d)?;
            let s = tape.sum(sq)?;
            tape.sqrt(s)
        }
        DistillKind::Mse => {
            let d = tape.sub(z_t, z_s)?;
            let sq = tape.square(d)?;
            tape.mean(sq)
        }
    }
}

/// Value of [`distill_loss`] for two plain vectors.
pub fn distill_loss_value(z_t: &[f64], z_s: &[f64], kind: DistillKind) -> Result<f64> {
    let mut tape = GradTape::new();
    let t = tape.constant(Tensor::new(vec![1, z_t.len()], z_t.to_vec())?);
    let s = tape.constant(Tensor::new(vec![1, z_s.len()], z_s.to_vec())?);
    let l = distill_loss(&mut tape, t, s, kind)?;
    tape.value(l).item()
}

/// Symmetric InfoNCE over a batch of matched rows: the mean of the
/// text→image and image→text cross-entropies of cosine similarities
/// divided by the temperature `tau` (a scalar).
pub fn contrastive_loss(tape: &mut GradTape, text: Var, image: Var, tau: Var) -> Result<Var> {
    let (bt, _) = tape.value(text).dims2()?;
    let (bi, _) = tape.value(image).dims2()?;
    if bt != bi || bt == 0 {
        return Err(Error::dims("contrastive_loss", tape.shape(text), tape.shape(image)));
    }
    let t = tape.value(tau).item()?;
    if t <= 0.0 || !t.is_finite() {
        return Err(Error::Contract(format!("temperature must be positive, got {t}")));
    }
    let tn = tape.l2_normalize_rows(text)?;
    let im = tape.l2_normalize_rows(image)?;
    let cos = tape.matmul_nt(tn, im)?;
    let logits = tape.div_scalar(cos, tau)?;
    let text_to_image = tape.log_softmax(logits, 1)?;
    let image_to_text = tape.log_softmax(logits, 0)?;
    let a = tape.diagonal(text_to_image)?;
    let b = tape.diagonal(image_to_text)?;
    let a = tape.mean(a)?;
    let b = tape.mean(b)?;
    let both = tape.add(a, b)?;
    tape.scale(both, -0.5)
}

/// `λ·short + (1 − λ)·long`.
pub fn mix_losses(tape: &mut GradTape, short: Var, long: Var, lambda: f64) -> Result<Var> {
    check_lambda(lambda)?;
    let s = tape.scale(short, lambda)?;
    let l = tape.scale(long, 1.0 - lambda)?;
    tape.add(s, l)
}

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("short-loss weight must lie in [0, 1], got {lambda}")));
    }
    Ok(())
}

/// Values of the two contrastive terms and their mix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointLoss {
    pub total: f64,
    pub short: f64,
    pub long: f64,
}

/// Joint loss from precomputed embedding matrices (`[B, p]` each); both
/// terms share the image embeddings.
pub fn joint_loss(short_text: &Tensor, long_text: &Tensor, image: &Tensor, tau: f64, lambda: f64) -> Result<JointLoss> {
    let mut tape = GradTape::new();
    let s = tape.constant(short_text.clone());
    let l = tape.constant(long_text.clone());
    let i = tape.constant(image.clone());
    let t = tape.constant(Tensor::scalar(tau));
    let short = contrastive_loss(&mut tape, s, i, t)?;
    let long = contrastive_loss(&mut tape, l, i, t)?;
    let total = mix_losses(&mut tape, short, long, lambda)?;
    Ok(JointLoss {
        total: tape.value(total).item()?,
        short: tape.value(short).item()?,
        long: tape.value(long).item()?,
    })
}

/// Contrastive loss of two embedding matrices.
pub fn contrastive_loss_value(text: &Tensor, image: &Tensor, tau: f64) -> Result<f64> {
    let mut tape = GradTape::new();
    let t = tape.constant(text.clone());
    let i = tape.constant(image.clone());
    let tau = tape.constant(Tensor::scalar(tau));
    let l = contrastive_loss(&mut tape, t, i, tau)?;
    tape.value(l).item()
}
