//! Gradient computation for whole batches and the parameter bookkeeping
//! shared by every training phase.
//!
//! Each example gets its own tape. Embeddings from all tapes are stacked on
//! a small loss tape; the gradient of the loss with respect to each stacked
//! row is then pushed back through that example's tape. Per-example
//! parameter gradients are summed in example order, so results do not depend
//! on scheduling.

use std::sync::Arc;

use super::loss::{contrastive_loss, distill_loss, mix_losses, DistillKind, JointLoss};
use crate::data::{Batch, TokenSequence};
use crate::encoder::{image_forward, image_vars, text_forward, text_vars, DualEncoder};
use crate::error::{Error, Result};
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

/// Allowed range of the learnable temperature.
pub const TEMPERATURE_RANGE: (f64, f64) = (1e-3, 100.0);

/// Which parts of a dual encoder an optimizer updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub text: bool,
    pub image: bool,
    pub temperature: bool,
}

impl Trainable {
    pub const TEXT_ONLY: Trainable = Trainable {
        text: true,
        image: false,
        temperature: false,
    };
}

/// Gradients in slot order. Frozen groups have empty lists.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub text: Vec<Tensor>,
    pub image: Vec<Tensor>,
    pub temperature: f64,
}

/// Current values of the trainable groups, with their weight-decay flags
/// (matrices decay; vectors and the temperature do not).
pub fn trainable_values(model: &DualEncoder, which: Trainable) -> (Vec<Tensor>, Vec<bool>) {
    let mut values = Vec::new();
    if which.text {
        values.extend(model.text.slots().into_iter().map(|(_, t)| (**t).clone()));
    }
    if which.image {
        values.extend(model.image.slots().into_iter().map(|(_, t)| (**t).clone()));
    }
    if which.temperature {
        values.push(Tensor::vector(vec![model.temperature]));
    }
    let decay = values.iter().map(|t| t.rank() >= 2).collect();
    (values, decay)
}

/// Flattens gradients in the order of [`trainable_values`].
pub fn flatten_gradients(grads: Gradients, which: Trainable) -> Vec<Tensor> {
    let mut out = Vec::new();
    if which.text {
        out.extend(grads.text);
    }
    if which.image {
        out.extend(grads.image);
    }
    if which.temperature {
        out.push(Tensor::vector(vec![grads.temperature]));
    }
    out
}

/// Writes values produced by [`trainable_values`] back into the model.
pub fn set_trainable_values(model: &mut DualEncoder, which: Trainable, values: Vec<Tensor>) -> Result<()> {
    let mut it = values.into_iter();
    let mut next = |name: &str, old: &Arc<Tensor>| -> Result<Arc<Tensor>> {
        let t = it
            .next()
            .ok_or_else(|| Error::Contract(format!("no updated value for `{name}`")))?;
        if t.shape() != old.shape() {
            return Err(Error::dims("set_trainable_values", t.shape(), old.shape()));
        }
        Ok(Arc::new(t))
    };
    if which.text {
        model.text = model.text.map(&mut next)?;
    }
    if which.image {
        model.image = model.image.map(&mut next)?;
    }
    if which.temperature {
        let t = next("temperature", &Arc::new(Tensor::vector(vec![0.0])))?;
        model.temperature = t.data()[0].clamp(TEMPERATURE_RANGE.0, TEMPERATURE_RANGE.1);
    }
    Ok(())
}

fn stack(rows: &[Vec<f64>]) -> Result<Tensor> {
    Tensor::from_rows(rows)
}

fn accumulate(acc: &mut Vec<Tensor>, tape: &GradTape, vars: Vec<Var>) {
    if acc.is_empty() {
        acc.extend(vars.iter().map(|&v| tape.grad_or_zeros(v)));
        return;
    }
    for (a, &v) in acc.iter_mut().zip(&vars) {
        if let Some(g) = tape.grad(v) {
            a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
        }
    }
}

fn surrogate(tape: &mut GradTape, terms: &[(Var, &[f64])]) -> Result<Var> {
    // Σ ⟨value, upstream⟩ has exactly the upstream gradients as its own.
    let mut total: Option<Var> = None;
    for &(v, upstream) in terms {
        let g = tape.constant(Tensor::new(tape.shape(v).to_vec(), upstream.to_vec())?);
        let p = tape.mul(v, g)?;
        let s = tape.sum(p)?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    total.ok_or_else(|| Error::Contract("empty surrogate".into()))
}

struct ExampleTape {
    tape: GradTape,
    text: Vec<Var>,
    image: Vec<Var>,
    short: Var,
    long: Option<Var>,
    image_emb: Var,
}

/// Embeddings of every view in a batch, without gradients.
pub struct BatchEmbeddings {
    pub short: Tensor,
    pub long: Tensor,
    pub image: Tensor,
}

pub fn batch_embeddings(model: &DualEncoder, batch: &Batch) -> Result<BatchEmbeddings> {
    let mut short = Vec::with_capacity(batch.len());
    let mut long = Vec::with_capacity(batch.len());
    let mut image = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let s = model.encode_text(&batch.short_view[i])?.vector;
        let l = if batch.long_view[i] == batch.short_view[i] {
            s.clone()
        } else {
            model.encode_text(&batch.long_view[i])?.vector
        };
        short.push(s);
        long.push(l);
        image.push(model.encode_image(&batch.images[i])?.vector);
    }
    Ok(BatchEmbeddings {
        short: stack(&short)?,
        long: stack(&long)?,
        image: stack(&image)?,
    })
}

/// Joint short/long contrastive loss of a batch and its gradients with
/// respect to the text tower, (optionally) the image tower, and the
/// temperature.
pub fn joint_loss_and_grads(
    model: &DualEncoder,
    batch: &Batch,
    lambda: f64,
    vision_trainable: bool,
) -> Result<(JointLoss, Gradients)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let freqs = model.frequencies()?;
    let mut examples = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let mut tape = GradTape::new();
        let tv = text_vars(&mut tape, &model.text, true);
        let iv = image_vars(&mut tape, &model.image, vision_trainable);
        let short = text_forward(&mut tape, &tv, &model.text_config, freqs.as_ref(), batch.short_view[i].ids(), 0)?
            .embedding;
        let long = if batch.long_view[i] == batch.short_view[i] {
            None
        } else {
            Some(
                text_forward(&mut tape, &tv, &model.text_config, freqs.as_ref(), batch.long_view[i].ids(), 0)?
                    .embedding,
            )
        };
        let image_emb = image_forward(&mut tape, &iv, &model.image_config, &batch.images[i])?;
        examples.push(ExampleTape {
            text: tv.slots().into_iter().map(|(_, v)| *v).collect(),
            image: iv.slots().into_iter().map(|(_, v)| *v).collect(),
            tape,
            short,
            long,
            image_emb,
        });
    }

    let rows = |f: &dyn Fn(&ExampleTape) -> Var| -> Result<Tensor> {
        stack(
            &examples
                .iter()
                .map(|e| e.tape.value(f(e)).data().to_vec())
                .collect::<Vec<_>>(),
        )
    };
    let mut lt = GradTape::new();
    let s = lt.param(rows(&|e| e.short)?);
    let l = lt.param(rows(&|e| e.long.unwrap_or(e.short))?);
    let im = lt.param(rows(&|e| e.image_emb)?);
    let tau = lt.param(Tensor::scalar(model.temperature));
    let short = contrastive_loss(&mut lt, s, im, tau)?;
    let long = contrastive_loss(&mut lt, l, im, tau)?;
    let total = mix_losses(&mut lt, short, long, lambda)?;
    lt.backward(total)?;
    let (gs, gl, gi) = (lt.grad_or_zeros(s), lt.grad_or_zeros(l), lt.grad_or_zeros(im));
    let width = gs.shape()[1];
    let row = |t: &Tensor, i: usize| t.data()[i * width..(i + 1) * width].to_vec();

    let mut grads = Gradients {
        text: Vec::new(),
        image: Vec::new(),
        temperature: lt.grad_or_zeros(tau).data()[0],
    };
    for (i, mut e) in examples.into_iter().enumerate() {
        let mut terms: Vec<(Var, Vec<f64>)> = Vec::new();
        match e.long {
            Some(long) => {
                terms.push((e.short, row(&gs, i)));
                terms.push((long, row(&gl, i)));
            }
            None => {
                let both = row(&gs, i).iter().zip(row(&gl, i)).map(|(a, b)| a + b).collect();
                terms.push((e.short, both));
            }
        }
        if vision_trainable {
            terms.push((e.image_emb, row(&gi, i)));
        }
        let refs: Vec<(Var, &[f64])> = terms.iter().map(|(v, g)| (*v, g.as_slice())).collect();
        let root = surrogate(&mut e.tape, &refs)?;
        e.tape.backward(root)?;
        accumulate(&mut grads.text, &e.tape, e.text);
        if vision_trainable {
            accumulate(&mut grads.image, &e.tape, e.image);
        }
    }
    let value = JointLoss {
        total: lt.value(total).item()?,
        short: lt.value(short).item()?,
        long: lt.value(long).item()?,
    };
    Ok((value, grads))
}

/// Mean distillation loss of the student against cached teacher embeddings
/// and its gradient with respect to the student's text tower.
pub fn distill_loss_and_grads(
    student: &DualEncoder,
    tokens: &[&TokenSequence],
    teacher_embeddings: &[&[f64]],
    kind: DistillKind,
) -> Result<(f64, Vec<Tensor>)> {
    if tokens.is_empty() || tokens.len() != teacher_embeddings.len() {
        return Err(Error::Contract(format!(
            "{} captions for {} teacher embeddings",
            tokens.len(),
            teacher_embeddings.len()
        )));
    }
    let freqs = student.frequencies()?;
    let scale = 1.0 / tokens.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::new();
    for (seq, z_t) in tokens.iter().zip(teacher_embeddings) {
        let mut tape = GradTape::new();
        let vars = text_vars(&mut tape, &student.text, true);
        let z_s = text_forward(&mut tape, &vars, &student.text_config, freqs.as_ref(), seq.ids(), 0)?.embedding;
        let z_t = tape.constant(Tensor::new(vec![1, z_t.len()], z_t.to_vec())?);
        let loss = distill_loss(&mut tape, z_t, z_s, kind)?;
        let loss = tape.scale(loss, scale)?;
        tape.backward(loss)?;
        total += tape.value(loss).item()?;
        accumulate(&mut grads, &tape, vars.slots().into_iter().map(|(_, v)| *v).collect());
    }
    Ok((total, grads))
}
