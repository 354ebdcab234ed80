//! `toklen`: runs one pipeline stage per invocation and records a manifest
//! of its inputs and hashed outputs.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 missing input,
//! 4 checkpoint phase mismatch, 5 non-finite value, 1 anything else.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use toklen_core::config::PipelineConfig;
use toklen_core::data::{
    generate_synthetic_corpus, load_corpus, save_corpus, tokenize, truncate, AttrOffset, ImageCaptionPair,
    TokenSequence, BOS, BYTE_OFFSET, EOS,
};
use toklen_core::encoder::Checkpoint;
use toklen_core::eval::{
    attention_spread, emit_report, relevance_distribution, Report, ReportFormat, RetrievalReport, RELEVANCE_WINDOWS,
};
use toklen_core::pipeline::{self, run_sweep, sweep_csv, RunManifest, SweepAxis, SweepData};
use toklen_core::posenc::SchemeKind;
use toklen_core::training::{write_loss_csv, DistillKind, LossRecord};

#[derive(Parser)]
#[command(name = "toklen", version, about = "Token-length extension for contrastive dual encoders")]
struct Cli {
    /// Pipeline configuration (TOML); every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every stage, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for artifacts and the run manifest.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic image–caption corpus.
    Gen(GenArgs),
    /// Pretrain the absolute-position teacher on window-capped captions.
    MakeTeacher(CorpusArg),
    /// Distill the teacher into a relative-position student.
    Distill(DistillArgs),
    /// Fine-tune a distilled student on long captions.
    Expand(ExpandArgs),
    /// Retrieval recall in both directions.
    Eval(EvalArgs),
    /// Attention of the aggregation token over one caption.
    AnalyzeAttention(AnalyzeArgs),
    /// Image similarity of sliding caption windows.
    AnalyzeRelevance(AnalyzeArgs),
    /// One ablation axis: distill, expand, and evaluate per value.
    Sweep(SweepArgs),
    /// Try to encode a probe of a given length.
    Probe(ProbeArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Number of pairs.
    #[arg(long)]
    count: usize,
    /// Fraction of pairs with long (> 77-token) captions.
    #[arg(long)]
    long_fraction: Option<f64>,
    /// Where the discriminating attribute sits: early, late, or mixed.
    #[arg(long)]
    attr_offset: Option<AttrOffset>,
    /// Output file name inside `--out`.
    #[arg(long, default_value = "corpus.jsonl")]
    name: String,
}

#[derive(Args)]
struct CorpusArg {
    #[arg(long)]
    corpus: PathBuf,
}

#[derive(Args)]
struct DistillArgs {
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// cosine, l2, or mse.
    #[arg(long)]
    loss: Option<DistillKind>,
    /// Student scheme: rope or cope.
    #[arg(long)]
    scheme: Option<SchemeKind>,
}

#[derive(Args)]
struct ExpandArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    t_g: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    /// rope_ntk (default), rope, cope, or absolute.
    #[arg(long)]
    scheme: Option<SchemeKind>,
    /// Keep the image tower fixed.
    #[arg(long)]
    freeze_vision: bool,
    /// Accept a checkpoint that is not from the distillation phase.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Recall cutoffs, comma separated.
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    /// Caption window; defaults to the checkpoint's own.
    #[arg(long)]
    t_g: Option<usize>,
    /// Also write an SVG chart.
    #[arg(long)]
    svg: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Pair to analyze.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Attention layer (default: last).
    #[arg(long)]
    layer: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    /// scheme, t_g, distill_loss, or lambda.
    #[arg(long)]
    axis: SweepAxis,
    /// Subset of values; defaults to the axis's full grid.
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<String>>,
    #[arg(long)]
    teacher: PathBuf,
    /// Corpus for distillation (and expansion unless `--expand-corpus`).
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    expand_corpus: Option<PathBuf>,
    #[arg(long)]
    eval_corpus: PathBuf,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Probe length in tokens, BOS and EOS included.
    #[arg(long, default_value_t = 100)]
    length: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use toklen_core::Error as E;
    match err.chain().find_map(|e| e.downcast_ref::<E>()) {
        Some(E::Config(_)) => 2,
        Some(E::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => 3,
        Some(E::PhaseMismatch { .. }) => 4,
        Some(E::NonFinite(_)) => 5,
        _ => 1,
    }
}

struct Session {
    config: PipelineConfig,
    out: PathBuf,
    manifest: RunManifest,
}

impl Session {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn corpus(&mut self, path: &Path) -> Result<Vec<ImageCaptionPair>> {
        self.manifest.input(path);
        Ok(load_corpus(path)?)
    }

    fn checkpoint(&mut self, path: &Path) -> Result<Checkpoint> {
        self.manifest.input(path);
        Ok(Checkpoint::load(path)?)
    }

    fn save_checkpoint(&mut self, ckpt: &Checkpoint, name: &str) -> Result<()> {
        let path = self.path(name);
        ckpt.save(&path)?;
        Ok(self.manifest.artifact(&path)?)
    }

    fn save_history(&mut self, history: &[LossRecord], name: &str) -> Result<()> {
        let path = self.path(name);
        write_loss_csv(&path, history)?;
        Ok(self.manifest.artifact(&path)?)
    }

    fn save_report(&mut self, report: &Report, stem: &str, svg: bool) -> Result<()> {
        let csv = self.path(&format!("{stem}.csv"));
        emit_report(report, &csv, ReportFormat::Csv)?;
        self.manifest.artifact(&csv)?;
        if svg {
            let path = self.path(&format!("{stem}.svg"));
            emit_report(report, &path, ReportFormat::Svg)?;
            self.manifest.artifact(&path)?;
        }
        Ok(())
    }

    fn finish(self, command: &str) -> Result<()> {
        let path = self.out.join(format!("manifest-{command}.json"));
        self.manifest.finish(&path)?;
        log::info!("manifest written to {}", path.display());
        Ok(())
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config = config.with_seed(seed);
    }
    let name = command_name(&cli.command);
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let mut s = Session {
        manifest: RunManifest::start(name, &config),
        config,
        out: cli.out,
    };
    match cli.command {
        Command::Gen(args) => gen(&mut s, args)?,
        Command::MakeTeacher(args) => {
            let corpus = s.corpus(&args.corpus)?;
            let (teacher, history) = pipeline::make_teacher(&s.config, &corpus)?;
            s.save_checkpoint(&teacher, "teacher.ckpt")?;
            s.save_history(&history, "teacher_loss.csv")?;
        }
        Command::Distill(args) => {
            if let Some(kind) = args.loss {
                s.config.distill.loss_kind = kind;
            }
            if let Some(scheme) = args.scheme {
                s.config.distill.student_scheme = scheme;
            }
            let teacher = s.checkpoint(&args.teacher)?;
            let corpus = s.corpus(&args.corpus)?;
            let (student, history) = pipeline::distill(&s.config, &teacher, &corpus)?;
            s.save_checkpoint(&student, "distilled.ckpt")?;
            s.save_history(&history, "distill_loss.csv")?;
        }
        Command::Expand(args) => {
            let e = &mut s.config.expand;
            e.t_g = args.t_g.unwrap_or(e.t_g);
            e.lambda = args.lambda.unwrap_or(e.lambda);
            e.scheme = args.scheme.unwrap_or(e.scheme);
            e.vision_trainable &= !args.freeze_vision;
            s.config.validate()?;
            let source = s.checkpoint(&args.checkpoint)?;
            let corpus = s.corpus(&args.corpus)?;
            let (expanded, history) = pipeline::expand(&s.config, &source, &corpus, args.force)?;
            s.save_checkpoint(&expanded, "expanded.ckpt")?;
            s.save_history(&history, "expand_loss.csv")?;
        }
        Command::Eval(args) => {
            let ckpt = s.checkpoint(&args.checkpoint)?;
            let corpus = s.corpus(&args.corpus)?;
            let ks = args.k.unwrap_or_else(|| s.config.eval.ks.clone());
            let t_g = args.t_g.unwrap_or(ckpt.model.text_config.context);
            let reports = pipeline::evaluate(&ckpt, &corpus, &ks, t_g)?;
            print_table(&reports);
            s.save_report(&Report::Retrieval(reports), "retrieval", args.svg)?;
        }
        Command::AnalyzeAttention(args) => {
            let ckpt = s.checkpoint(&args.checkpoint)?;
            let pair = pick(&s.corpus(&args.corpus)?, args.index)?;
            let tokens = truncate(&tokenize(&pair.caption), ckpt.model.text_config.context)?;
            let spread = attention_spread(&ckpt.model, &tokens, args.layer)?;
            println!(
                "{}: {} tokens, entropy {:.4} nats, mass beyond 77 tokens {:.4}",
                pair.id,
                tokens.len(),
                spread.entropy,
                spread.mass_beyond_window
            );
            s.save_report(&Report::Attention(spread), "attention", true)?;
        }
        Command::AnalyzeRelevance(args) => {
            let ckpt = s.checkpoint(&args.checkpoint)?;
            let pair = pick(&s.corpus(&args.corpus)?, args.index)?;
            let (sizes, strides): (Vec<usize>, Vec<usize>) = RELEVANCE_WINDOWS.iter().copied().unzip();
            let grids = relevance_distribution(&ckpt.model, &pair, &sizes, &strides)?;
            for g in &grids {
                let best = g.cosines.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                println!("window {:>2} stride {:>2}: {} windows, best cosine {best:.4}", g.window_size, g.stride, g.cosines.len());
            }
            s.save_report(&Report::Relevance(grids), "relevance", true)?;
        }
        Command::Sweep(args) => {
            let teacher = s.checkpoint(&args.teacher)?;
            let distill = s.corpus(&args.corpus)?;
            let expand = match &args.expand_corpus {
                Some(path) => s.corpus(path)?,
                None => distill.clone(),
            };
            let eval = s.corpus(&args.eval_corpus)?;
            let values = args.values.unwrap_or_else(|| args.axis.default_values());
            let data = SweepData {
                distill: &distill,
                expand: &expand,
                eval: &eval,
            };
            let rows = run_sweep(&s.config, &teacher, &data, args.axis, &values)?;
            let csv = sweep_csv(&rows);
            print!("{csv}");
            let path = s.path(&format!("sweep-{}.csv", args.axis));
            fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
            s.manifest.artifact(&path)?;
        }
        Command::Probe(args) => {
            let ckpt = s.checkpoint(&args.checkpoint)?;
            let probe = probe_tokens(args.length)?;
            match ckpt.model.encode_text(&probe) {
                Ok(_) => println!(
                    "encoded a {}-token probe (`{}`, window {})",
                    args.length,
                    ckpt.model.text_config.scheme.kind(),
                    ckpt.model.text_config.context
                ),
                Err(err) => println!("refused a {}-token probe: {err}", args.length),
            }
        }
    }
    s.finish(name)
}

fn command_name(command: &Command) -> &'static str {
    match command {
        Command::Gen(_) => "gen",
        Command::MakeTeacher(_) => "make-teacher",
        Command::Distill(_) => "distill",
        Command::Expand(_) => "expand",
        Command::Eval(_) => "eval",
        Command::AnalyzeAttention(_) => "analyze-attention",
        Command::AnalyzeRelevance(_) => "analyze-relevance",
        Command::Sweep(_) => "sweep",
        Command::Probe(_) => "probe",
    }
}

fn gen(s: &mut Session, args: GenArgs) -> Result<()> {
    let data = &mut s.config.data;
    data.count = args.count;
    data.long_fraction = args.long_fraction.unwrap_or(data.long_fraction);
    data.attr_offset = args.attr_offset.unwrap_or(data.attr_offset);
    s.config.validate()?;
    let corpus = generate_synthetic_corpus(&s.config.data.synth(s.config.seed))?;
    let path = s.path(&args.name);
    save_corpus(&path, &corpus)?;
    s.manifest.artifact(&path)?;
    println!("wrote {} pairs to {}", corpus.len(), path.display());
    Ok(())
}

fn pick(corpus: &[ImageCaptionPair], index: usize) -> Result<ImageCaptionPair> {
    match corpus.get(index) {
        Some(pair) => Ok(pair.clone()),
        None => bail!("pair index {index} outside a corpus of {}", corpus.len()),
    }
}

/// BOS, repeated spaces, EOS.
fn probe_tokens(length: usize) -> Result<TokenSequence> {
    if length < 2 {
        bail!("a probe needs at least 2 tokens (BOS and EOS)");
    }
    let mut ids = vec![BOS];
    ids.extend(std::iter::repeat_n(BYTE_OFFSET + usize::from(b' '), length - 2));
    ids.push(EOS);
    Ok(TokenSequence::new(ids)?)
}

fn print_table(reports: &[RetrievalReport]) {
    println!("{:<10} {:>5} {:>8}", "direction", "k", "recall");
    for r in reports {
        for rk in &r.recalls {
            println!("{:<10} {:>5} {:>7.2}%", r.direction.as_str(), rk.k, rk.recall);
        }
    }
}
