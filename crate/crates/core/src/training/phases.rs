//! The three training runs: contrastive pretraining of the fixed-window
//! teacher, distillation into a relative-position student, and expansion of
//! the student's window with the joint short/long objective.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{check_lambda, DistillKind};
use super::optim::{adamw_step, lr_schedule, AdamW, LossRecord, TrainState};
use super::trainer::{
    distill_loss_and_grads, flatten_gradients, joint_loss_and_grads, set_trainable_values, trainable_values, Trainable,
};
use crate::data::{batch_indices, make_batch, truncate, tokenize, ImageCaptionPair, TokenSequence};
use crate::encoder::{init_text, BlockParams, DualEncoder, TextParams, ImageConfig, TextConfig, INITIAL_TEMPERATURE};
use crate::error::{Error, Result};
use crate::posenc::{PositionalScheme, SchemeKind, TEACHER_WINDOW};
use crate::tensor::Tensor;

/// Contrastive pretraining of the absolute-position teacher on captions cut
/// to its window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            epochs: 3,
            batch_size: 32,
            learning_rate: 1e-3,
            warmup_steps: 20,
            weight_decay: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    /// Positional scheme of the student (`rope`, or `cope` for ablations).
    pub student_scheme: SchemeKind,
    pub loss_kind: DistillKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            student_scheme: SchemeKind::Rope,
            loss_kind: DistillKind::Cosine,
            epochs: 6,
            batch_size: 32,
            learning_rate: 5e-4,
            warmup_steps: 20,
            weight_decay: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpandConfig {
    /// Positional scheme after expansion; `rope_ntk` is the method itself,
    /// the others serve as ablations.
    pub scheme: SchemeKind,
    /// Long-view window.
    pub t_g: usize,
    pub alpha: f64,
    /// Weight of the short-view term.
    pub lambda: f64,
    /// Initial value of the learnable temperature.
    pub temperature: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub vision_trainable: bool,
    pub seed: u64,
}

impl Default for ExpandConfig {
    fn default() -> Self {
        ExpandConfig {
            scheme: SchemeKind::RopeNtk,
            t_g: 248,
            alpha: 8.0,
            lambda: 0.5,
            temperature: INITIAL_TEMPERATURE,
            epochs: 1,
            batch_size: 32,
            learning_rate: 5e-4,
            warmup_steps: 10,
            weight_decay: 0.01,
            vision_trainable: true,
            seed: 0,
        }
    }
}

impl ExpandConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        if self.temperature <= 0.0 {
            return Err(Error::Config(format!("initial temperature must be positive, got {}", self.temperature)));
        }
        if self.t_g < TEACHER_WINDOW {
            return Err(Error::Config(format!("t_g must be at least {TEACHER_WINDOW}, got {}", self.t_g)));
        }
        check_batch(self.batch_size)
    }
}

fn check_batch(batch_size: usize) -> Result<()> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    Ok(())
}

/// A trained model and one loss record per optimizer step.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: DualEncoder,
    pub history: Vec<LossRecord>,
}

struct Loop<'a> {
    state: TrainState,
    total_steps: usize,
    warmup: usize,
    base_lr: f64,
    hp: AdamW,
    which: Trainable,
    model: &'a mut DualEncoder,
}

impl Loop<'_> {
    fn step(&mut self, grads: Vec<Tensor>, loss: f64, terms: Option<(f64, f64)>) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        let lr = lr_schedule(self.state.step + 1, self.warmup, self.base_lr, self.total_steps);
        let (mut values, decay) = trainable_values(self.model, self.which);
        adamw_step(&mut values, &grads, &mut self.state, lr, &self.hp, &decay)?;
        set_trainable_values(self.model, self.which, values)?;
        self.state.history.push(LossRecord {
            step: self.state.step,
            lr,
            loss,
            loss_short: terms.map(|t| t.0),
            loss_long: terms.map(|t| t.1),
        });
        Ok(())
    }
}

fn steps_for(count: usize, batch_size: usize, epochs: usize) -> usize {
    count.div_ceil(batch_size) * epochs
}

/// Contrastive run over pairs with the given views; shared by teacher
/// pretraining and expansion.
#[allow(clippy::too_many_arguments)]
fn contrastive_run(
    model: &mut DualEncoder,
    corpus: &[ImageCaptionPair],
    t_f: usize,
    t_g: usize,
    lambda: f64,
    vision_trainable: bool,
    schedule: (usize, usize, f64, f64, usize),
    seed: u64,
) -> Result<Vec<LossRecord>> {
    let (epochs, batch_size, lr, decay, warmup) = schedule;
    check_batch(batch_size)?;
    let which = Trainable {
        text: true,
        image: vision_trainable,
        temperature: true,
    };
    let mut run = Loop {
        state: TrainState::default(),
        total_steps: steps_for(corpus.len(), batch_size, epochs),
        warmup,
        base_lr: lr,
        hp: AdamW::with_decay(decay),
        which,
        model,
    };
    for epoch in 0..epochs {
        for idx in batch_indices(corpus.len(), batch_size, seed, epoch)? {
            let pairs: Vec<&ImageCaptionPair> = idx.iter().map(|&i| &corpus[i]).collect();
            let batch = make_batch(&pairs, t_f, t_g)?;
            let (loss, grads) = joint_loss_and_grads(run.model, &batch, lambda, vision_trainable)?;
            run.step(flatten_gradients(grads, which), loss.total, Some((loss.short, loss.long)))?;
        }
        if let Some(last) = run.state.history.last() {
            log::info!("epoch {epoch}: step {} loss {:.4}", last.step, last.loss);
        }
    }
    Ok(run.state.history)
}

/// Trains a fresh absolute-position dual encoder contrastively on captions
/// cut to its window.
pub fn pretrain_teacher(
    text_config: TextConfig,
    image_config: ImageConfig,
    corpus: &[ImageCaptionPair],
    config: &TeacherConfig,
) -> Result<TrainOutcome> {
    if text_config.scheme != PositionalScheme::Absolute {
        return Err(Error::Config("the teacher must use absolute positions".into()));
    }
    let window = text_config.context;
    let mut model = DualEncoder::init(text_config, image_config, config.seed)?;
    let history = contrastive_run(
        &mut model,
        corpus,
        window,
        window,
        1.0,
        true,
        (
            config.epochs,
            config.batch_size,
            config.learning_rate,
            config.weight_decay,
            config.warmup_steps,
        ),
        config.seed,
    )?;
    Ok(TrainOutcome { model, history })
}

/// A relative-position student that copies every teacher weight except the
/// absolute position table; new positional parameters (CoPE tables) are
/// freshly initialized from the teacher's seed.
pub fn student_from_teacher(teacher: &DualEncoder, scheme: PositionalScheme) -> Result<DualEncoder> {
    if teacher.text_config.scheme != PositionalScheme::Absolute {
        return Err(Error::Config(format!(
            "teacher must use absolute positions, found `{}`",
            teacher.text_config.scheme.kind()
        )));
    }
    if scheme == PositionalScheme::Absolute {
        return Err(Error::Config("the student must use a relative positional scheme".into()));
    }
    let config = teacher.text_config.with_scheme(scheme, teacher.text_config.context);
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(teacher.seed);
    let fresh = init_text(&config, &mut rng);
    let mut student = teacher.clone();
    student.text = TextParams {
        position_table: None,
        blocks: teacher
            .text
            .blocks
            .iter()
            .zip(&fresh.blocks)
            .map(|(t, f)| BlockParams {
                cope_table: f.cope_table.clone(),
                ..t.clone()
            })
            .collect(),
        ..teacher.text.clone()
    };
    student.text_config = config;
    Ok(student)
}

fn check_same_dims(a: &TextConfig, b: &TextConfig) -> Result<()> {
    let dims = |c: &TextConfig| (c.vocab_size, c.d_model, c.n_heads, c.n_layers, c.projection_dim);
    if dims(a) != dims(b) {
        return Err(Error::Config(format!(
            "teacher (vocab, d_model, heads, layers, projection) {:?} differs from student {:?}",
            dims(a),
            dims(b)
        )));
    }
    Ok(())
}

/// Short views (capped at the teacher window) of every caption.
pub fn window_views(corpus: &[ImageCaptionPair], window: usize) -> Result<Vec<TokenSequence>> {
    corpus.iter().map(|p| truncate(&tokenize(&p.caption), window)).collect()
}

/// Trains `student`'s text tower to reproduce the frozen teacher's
/// embeddings on window-capped captions. The teacher is only ever read:
/// its embeddings are computed once, up front, as constants.
pub fn run_distillation(
    teacher: &DualEncoder,
    mut student: DualEncoder,
    corpus: &[ImageCaptionPair],
    config: &DistillConfig,
) -> Result<TrainOutcome> {
    check_batch(config.batch_size)?;
    if teacher.text_config.scheme != PositionalScheme::Absolute {
        return Err(Error::Config("distillation expects an absolute-position teacher".into()));
    }
    check_same_dims(&teacher.text_config, &student.text_config)?;
    let views = window_views(corpus, TEACHER_WINDOW.min(teacher.text_config.context))?;
    let targets = views
        .iter()
        .map(|v| teacher.encode_text(v).map(|e| e.vector))
        .collect::<Result<Vec<_>>>()?;
    let mut run = Loop {
        state: TrainState::default(),
        total_steps: steps_for(corpus.len(), config.batch_size, config.epochs),
        warmup: config.warmup_steps,
        base_lr: config.learning_rate,
        hp: AdamW::with_decay(config.weight_decay),
        which: Trainable::TEXT_ONLY,
        model: &mut student,
    };
    for epoch in 0..config.epochs {
        for idx in batch_indices(corpus.len(), config.batch_size, config.seed, epoch)? {
            let tokens: Vec<&TokenSequence> = idx.iter().map(|&i| &views[i]).collect();
            let z_t: Vec<&[f64]> = idx.iter().map(|&i| targets[i].as_slice()).collect();
            let (loss, grads) = distill_loss_and_grads(run.model, &tokens, &z_t, config.loss_kind)?;
            run.step(grads, loss, None)?;
        }
        if let Some(last) = run.state.history.last() {
            log::info!("epoch {epoch}: step {} distill loss {:.5}", last.step, last.loss);
        }
    }
    let history = run.state.history;
    Ok(TrainOutcome { model: student, history })
}

/// Text configuration after expansion to `config.t_g` under `config.scheme`.
/// Absolute tables cannot grow, so that scheme keeps its window and long
/// views are cut to it.
pub fn expanded_text_config(source: &TextConfig, config: &ExpandConfig) -> Result<TextConfig> {
    let base = match source.scheme {
        PositionalScheme::Rope { base } | PositionalScheme::RopeNtk { base, .. } => Some(base),
        _ => None,
    };
    let mismatch = || {
        Error::Config(format!(
            "cannot expand a `{}` encoder under `{}`",
            source.scheme.kind(),
            config.scheme
        ))
    };
    let (scheme, context) = match config.scheme {
        SchemeKind::RopeNtk => (
            PositionalScheme::RopeNtk {
                base: base.ok_or_else(mismatch)?,
                alpha: config.alpha,
                original_window: TEACHER_WINDOW,
            },
            config.t_g,
        ),
        SchemeKind::Rope => (
            PositionalScheme::Rope {
                base: base.ok_or_else(mismatch)?,
            },
            config.t_g,
        ),
        SchemeKind::Cope => match source.scheme {
            PositionalScheme::Cope { .. } => (source.scheme.clone(), config.t_g),
            _ => return Err(mismatch()),
        },
        SchemeKind::Absolute => match source.scheme {
            PositionalScheme::Absolute => (PositionalScheme::Absolute, source.context),
            _ => return Err(mismatch()),
        },
    };
    let out = source.with_scheme(scheme, context);
    out.validate()?;
    Ok(out)
}

/// Fine-tunes `source` on long captions with the joint objective. The NTK
/// rescaling (for `rope_ntk`) is part of the new configuration and so is in
/// force before the first step.
pub fn run_expansion(source: &DualEncoder, corpus: &[ImageCaptionPair], config: &ExpandConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let mut model = source.clone();
    model.text_config = expanded_text_config(&source.text_config, config)?;
    if model.text_config.context < config.t_g {
        log::warn!(
            "`{}` keeps its {}-token window; long views are cut to it",
            config.scheme,
            model.text_config.context
        );
    }
    model.temperature = config.temperature;
    let t_g = model.text_config.context;
    let history = contrastive_run(
        &mut model,
        corpus,
        TEACHER_WINDOW,
        t_g,
        config.lambda,
        config.vision_trainable,
        (
            config.epochs,
            config.batch_size,
            config.learning_rate,
            config.weight_decay,
            config.warmup_steps,
        ),
        config.seed,
    )?;
    Ok(TrainOutcome { model, history })
}

/// Mean cosine similarity between teacher and student embeddings of the
/// window-capped captions.
pub fn teacher_student_cosine(teacher: &DualEncoder, student: &DualEncoder, pairs: &[ImageCaptionPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Contract("no captions to compare".into()));
    }
    let views = window_views(pairs, TEACHER_WINDOW)?;
    let mut total = 0.0;
    for v in &views {
        total += teacher.encode_text(v)?.cosine(&student.encode_text(v)?);
    }
    Ok(total / views.len() as f64)
}
