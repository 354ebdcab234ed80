//! The pipeline stages as plain functions (each takes its inputs explicitly
//! and returns its artifacts), the run manifest, and ablation sweeps.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::data::{generate_synthetic_corpus, save_corpus, ImageCaptionPair};
use crate::encoder::{Checkpoint, Phase};
use crate::error::{Error, Result};
use crate::eval::{emit_report, evaluate_retrieval, Direction, Report, ReportFormat, RetrievalReport};
use crate::posenc::{PositionalScheme, SchemeKind, TEACHER_WINDOW};
use crate::training::{
    pretrain_teacher, run_distillation, run_expansion, student_from_teacher, teacher_student_cosine,
    write_loss_csv, DistillKind, LossRecord,
};

/// Training corpus and held-out corpus for `config.data`.
pub fn generate(config: &PipelineConfig) -> Result<(Vec<ImageCaptionPair>, Vec<ImageCaptionPair>)> {
    Ok((
        generate_synthetic_corpus(&config.data.synth(config.seed))?,
        generate_synthetic_corpus(&config.data.eval_synth(config.seed))?,
    ))
}

/// Trains the absolute-position teacher on window-capped captions.
pub fn make_teacher(config: &PipelineConfig, corpus: &[ImageCaptionPair]) -> Result<(Checkpoint, Vec<LossRecord>)> {
    let text = config.text.with_scheme(PositionalScheme::Absolute, config.text.context);
    let out = pretrain_teacher(text, config.image.clone(), corpus, &config.teacher)?;
    Ok((Checkpoint::new(Phase::Teacher, out.model), out.history))
}

/// Distills a teacher checkpoint into a relative-position student.
pub fn distill(
    config: &PipelineConfig,
    teacher: &Checkpoint,
    corpus: &[ImageCaptionPair],
) -> Result<(Checkpoint, Vec<LossRecord>)> {
    teacher.require_phase(Phase::Teacher)?;
    let scheme = PositionalScheme::default_for(config.distill.student_scheme, config.expand.alpha);
    let student = student_from_teacher(&teacher.model, scheme)?;
    let out = run_distillation(&teacher.model, student, corpus, &config.distill)?;
    Ok((Checkpoint::new(Phase::Distilled, out.model), out.history))
}

/// Expands a distilled checkpoint. `force` accepts a checkpoint from any
/// phase (the absolute baseline expands its teacher directly).
pub fn expand(
    config: &PipelineConfig,
    source: &Checkpoint,
    corpus: &[ImageCaptionPair],
    force: bool,
) -> Result<(Checkpoint, Vec<LossRecord>)> {
    if !force {
        source.require_phase(Phase::Distilled)?;
    }
    let out = run_expansion(&source.model, corpus, &config.expand)?;
    Ok((Checkpoint::new(Phase::Expanded, out.model), out.history))
}

/// Retrieval in both directions on the long views (capped at `t_g` and at
/// the model's own window).
pub fn evaluate(checkpoint: &Checkpoint, corpus: &[ImageCaptionPair], ks: &[usize], t_g: usize) -> Result<Vec<RetrievalReport>> {
    evaluate_retrieval(&checkpoint.model, corpus, ks, t_g)
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    fs::read(path).map(|b| sha256_hex(&b)).map_err(|e| Error::io(path, e))
}

/// Record of one command: what ran, with which configuration, and the
/// hashes of everything it wrote.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: PipelineConfig,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    /// Output path → SHA-256.
    pub artifacts: BTreeMap<PathBuf, String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn start(command: impl Into<String>, config: &PipelineConfig) -> Self {
        RunManifest {
            command: command.into(),
            config: config.clone(),
            seed: config.seed,
            inputs: Vec::new(),
            artifacts: BTreeMap::new(),
            started_unix: unix_now(),
            finished_unix: 0,
        }
    }

    pub fn input(&mut self, path: impl Into<PathBuf>) {
        self.inputs.push(path.into());
    }

    /// Hashes a written file into the manifest.
    pub fn artifact(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.artifacts.insert(path.to_path_buf(), file_sha256(path)?);
        Ok(())
    }

    /// Stamps the finish time and writes the manifest as JSON.
    pub fn finish(mut self, path: impl AsRef<Path>) -> Result<RunManifest> {
        self.finished_unix = unix_now();
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self).expect("manifests always serialize");
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
        Ok(self)
    }

    /// Artifact hashes keyed by file name, independent of the output
    /// directory, for comparing two runs.
    pub fn hashes_by_name(&self) -> BTreeMap<String, String> {
        self.artifacts
            .iter()
            .map(|(p, h)| {
                let name = p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
                (name, h.clone())
            })
            .collect()
    }
}

/// Runs gen → make-teacher → distill → expand → eval into `out`, writing
/// every artifact and one manifest covering them.
pub fn run_full(config: &PipelineConfig, out: &Path) -> Result<RunManifest> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut manifest = RunManifest::start("pipeline", config);
    let (train, held_out) = generate(config)?;
    let write = |name: &str| out.join(name);
    save_corpus(write("corpus.jsonl"), &train)?;
    save_corpus(write("eval.jsonl"), &held_out)?;

    let (teacher, h) = make_teacher(config, &train)?;
    teacher.save(write("teacher.ckpt"))?;
    write_loss_csv(write("teacher_loss.csv"), &h)?;

    let (student, h) = distill(config, &teacher, &train)?;
    student.save(write("distilled.ckpt"))?;
    write_loss_csv(write("distill_loss.csv"), &h)?;

    let (expanded, h) = expand(config, &student, &train, false)?;
    expanded.save(write("expanded.ckpt"))?;
    write_loss_csv(write("expand_loss.csv"), &h)?;

    let reports = evaluate(&expanded, &held_out, &config.eval.ks, config.expand.t_g)?;
    emit_report(&Report::Retrieval(reports), write("retrieval.csv"), ReportFormat::Csv)?;

    for name in [
        "corpus.jsonl",
        "eval.jsonl",
        "teacher.ckpt",
        "teacher_loss.csv",
        "distilled.ckpt",
        "distill_loss.csv",
        "expanded.ckpt",
        "expand_loss.csv",
        "retrieval.csv",
    ] {
        manifest.artifact(write(name))?;
    }
    manifest.finish(write("manifest.json"))
}

/// The one hyperparameter a sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Positional scheme of the expanded model.
    Scheme,
    /// Long-view window, with the image tower frozen.
    TG,
    /// Distillation loss.
    DistillLoss,
    /// Weight of the short-view term.
    Lambda,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Scheme => "scheme",
            SweepAxis::TG => "t_g",
            SweepAxis::DistillLoss => "distill_loss",
            SweepAxis::Lambda => "lambda",
        }
    }

    /// The grid swept when no explicit values are given.
    pub fn default_values(self) -> Vec<String> {
        let v: Vec<String> = match self {
            SweepAxis::Scheme => SchemeKind::ALL.iter().map(|k| k.as_str().to_string()).collect(),
            SweepAxis::TG => (1..=4).map(|n| (n * TEACHER_WINDOW).to_string()).collect(),
            SweepAxis::DistillLoss => DistillKind::ALL.iter().map(|k| k.as_str().to_string()).collect(),
            SweepAxis::Lambda => ["0", "0.25", "0.5", "0.75", "1"].iter().map(|s| s.to_string()).collect(),
        };
        v
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [SweepAxis::Scheme, SweepAxis::TG, SweepAxis::DistillLoss, SweepAxis::Lambda]
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown sweep axis `{s}`")))
    }
}

/// One metric of one grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: String,
    pub metric: String,
    pub score: f64,
}

pub const SWEEP_HEADER: &str = "axis,value,metric,score";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.axis, r.value, r.metric, r.score));
    }
    out
}

/// Corpora used by a sweep.
pub struct SweepData<'a> {
    /// Captions for distillation (typically the teacher's corpus).
    pub distill: &'a [ImageCaptionPair],
    /// Captions for expansion.
    pub expand: &'a [ImageCaptionPair],
    /// Held-out pairs for retrieval.
    pub eval: &'a [ImageCaptionPair],
}

/// Runs distill → expand → eval for each value of `axis`, starting from a
/// trained teacher. Each grid point reports R@1 in both directions;
/// distillation-loss points also report held-out teacher↔student cosine.
pub fn run_sweep(
    config: &PipelineConfig,
    teacher: &Checkpoint,
    data: &SweepData,
    axis: SweepAxis,
    values: &[String],
) -> Result<Vec<SweepRow>> {
    teacher.require_phase(Phase::Teacher)?;
    let bad = |v: &str| Error::Config(format!("bad value `{v}` for sweep axis {axis}"));
    let mut rows = Vec::new();
    let mut rope_student: Option<Checkpoint> = None;
    for value in values {
        let mut cfg = config.clone();
        let mut extra = Vec::new();
        let source = match axis {
            SweepAxis::Scheme => {
                let kind: SchemeKind = value.parse().map_err(|_| bad(value))?;
                cfg.expand.scheme = kind;
                match kind {
                    SchemeKind::Absolute => teacher.clone(),
                    SchemeKind::Cope => {
                        cfg.distill.student_scheme = SchemeKind::Cope;
                        distill(&cfg, teacher, data.distill)?.0
                    }
                    SchemeKind::Rope | SchemeKind::RopeNtk => cached_rope(&mut rope_student, config, teacher, data)?,
                }
            }
            SweepAxis::TG => {
                cfg.expand.t_g = value.parse().map_err(|_| bad(value))?;
                cfg.expand.vision_trainable = false;
                cached_rope(&mut rope_student, config, teacher, data)?
            }
            SweepAxis::DistillLoss => {
                cfg.distill.loss_kind = value.parse().map_err(|_| bad(value))?;
                cfg.distill.student_scheme = SchemeKind::Rope;
                let student = distill(&cfg, teacher, data.distill)?.0;
                extra.push((
                    "teacher_cosine",
                    teacher_student_cosine(&teacher.model, &student.model, data.eval)?,
                ));
                student
            }
            SweepAxis::Lambda => {
                cfg.expand.lambda = value.parse().map_err(|_| bad(value))?;
                cached_rope(&mut rope_student, config, teacher, data)?
            }
        };
        let (expanded, _) = expand(&cfg, &source, data.expand, true)?;
        let reports = evaluate(&expanded, data.eval, &[1], cfg.expand.t_g)?;
        for r in &reports {
            let metric = match r.direction {
                Direction::Img2Txt => "img2txt_r1",
                Direction::Txt2Img => "txt2img_r1",
            };
            rows.push(SweepRow {
                axis,
                value: value.clone(),
                metric: metric.to_string(),
                score: r.at(1).expect("R@1 requested"),
            });
        }
        for (metric, score) in extra {
            rows.push(SweepRow {
                axis,
                value: value.clone(),
                metric: metric.to_string(),
                score,
            });
        }
        log::info!("sweep {axis}={value} done");
    }
    Ok(rows)
}

fn cached_rope(
    cache: &mut Option<Checkpoint>,
    config: &PipelineConfig,
    teacher: &Checkpoint,
    data: &SweepData,
) -> Result<Checkpoint> {
    if cache.is_none() {
        let mut cfg = config.clone();
        cfg.distill.student_scheme = SchemeKind::Rope;
        *cache = Some(distill(&cfg, teacher, data.distill)?.0);
    }
    Ok(cache.clone().expect("filled above"))
}
