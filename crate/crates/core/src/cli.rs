//! Command-line driver: one subcommand per pipeline stage.
//!
//! Settings come from an optional TOML file (`--config`) with flags layered
//! on top. Commands that write to `--out` also leave the effective
//! configuration there as `config.toml`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::evaluation::{ablation_runner, evaluate_classifier, recognizability, AblationAxis, AblationBase, GridPoint};
use crate::model::{Model, ModelConfig};
use crate::primitives::AbstractionConfig;
use crate::sampling::SamplerConfig;
use crate::service::{classify_sketch, complete_sketch, serve, ServiceConfig, ServiceState};
use crate::stroke_data::{
    load_corpus, parse_quickdraw_file, save_corpus, synthetic_corpus, ShapeKind, SketchCorpus, Split, Stroke3Point,
};
use crate::tokenizer::Vocabulary;
use crate::training::{
    finetune_classify, finetune_completion, load_checkpoint, pretrain, save_checkpoint, tokenize_corpus, write_metrics,
    Checkpoint, LabeledDataset, TrainPlan, TrainingRun,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn missing(flag: &str) -> CliError {
    CliError::Usage(format!("missing required input `{flag}`"))
}

#[derive(Debug, Parser)]
#[command(name = "primsketch", version, about = "Primitive-token sketch modelling")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonFlags,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand; each has a config-file key.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonFlags {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Comma-separated class names.
    #[arg(long, global = true, value_delimiter = ',')]
    pub classes: Option<Vec<String>>,
    #[arg(long = "k-primitives", global = true)]
    pub k_primitives: Option<usize>,
    #[arg(long = "prim-length", global = true)]
    pub prim_length: Option<f64>,
    #[arg(long = "max-seq-len", global = true)]
    pub max_seq_len: Option<usize>,
    #[arg(long, global = true)]
    pub layers: Option<usize>,
    #[arg(long, global = true)]
    pub heads: Option<usize>,
    #[arg(long, global = true)]
    pub hidden: Option<usize>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub batch: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
    #[arg(long = "num-samples", global = true)]
    pub num_samples: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FinetuneTask {
    Completion,
    Classify,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert QuickDraw ndjson (or synthetic shapes) into a binary corpus.
    Ingest {
        /// ndjson files or directories holding them.
        #[arg(long, num_args = 1..)]
        input: Vec<PathBuf>,
        /// Generate this many synthetic sketches per shape class instead.
        #[arg(long)]
        synthetic: Option<usize>,
        #[arg(long, default_value_t = 0.02)]
        jitter: f64,
        #[arg(long, default_value = "train")]
        split: Split,
        #[arg(long)]
        per_class: Option<usize>,
    },
    /// Sequence-length histogram and truncation rate of a corpus.
    TokenizeStats {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        bucket: usize,
    },
    /// Next-token pre-training over every class of a corpus.
    Pretrain {
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Per-class completion or classification fine-tuning.
    Finetune {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "completion")]
        task: FinetuneTask,
        /// Class for completion fine-tuning.
        #[arg(long)]
        class: Option<String>,
        #[arg(long)]
        validation_corpus: Option<PathBuf>,
        #[arg(long)]
        freeze_backbone: bool,
    },
    /// Sample sketches from scratch.
    Generate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        class: Option<String>,
    },
    /// Complete a partial sketch given as a JSON array of [dx, dy, pen].
    Complete {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        class: Option<String>,
        #[arg(long)]
        strokes: Option<PathBuf>,
    },
    /// Top classes of a sketch given as a JSON array of [dx, dy, pen].
    Classify {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        strokes: Option<PathBuf>,
    },
    /// Recognition accuracy on a corpus, or recognizability of generated sketches.
    Eval {
        /// Classifier checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Score samples from the per-class checkpoints in `[service.checkpoints]`.
        #[arg(long)]
        recognizability: bool,
    },
    /// Classification accuracy across a grid of class counts, train sizes or networks.
    Ablate {
        #[arg(long)]
        axis: String,
        /// Comma-separated grid values; `L-A-H` for network-size.
        #[arg(long)]
        grid: String,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        test_corpus: Option<PathBuf>,
        #[arg(long)]
        per_class: Option<usize>,
    },
    /// Run the HTTP inference service.
    Serve {
        #[arg(long)]
        bind: Option<String>,
        /// Per-class checkpoint as `class=path`; repeatable.
        #[arg(long = "class-checkpoint", value_parser = parse_assignment)]
        class_checkpoint: Vec<(String, PathBuf)>,
        #[arg(long)]
        classifier: Option<PathBuf>,
    },
}

fn parse_assignment(text: &str) -> std::result::Result<(String, PathBuf), String> {
    match text.split_once('=') {
        Some((k, v)) if !k.is_empty() && !v.is_empty() => Ok((k.to_string(), PathBuf::from(v))),
        _ => Err(format!("expected class=path, got `{text}`")),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: String,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub hidden: Option<usize>,
    pub max_seq_len: Option<usize>,
    pub mlp_multiplier: Option<usize>,
    pub dropout: Option<f64>,
    pub tie_head: Option<bool>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: "desk".into(),
            layers: None,
            heads: None,
            hidden: None,
            max_seq_len: None,
            mlp_multiplier: None,
            dropout: None,
            tie_head: None,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self, vocab: &Vocabulary) -> crate::Result<ModelConfig> {
        let mut c = ModelConfig::preset(&self.preset, vocab)?;
        c.layers = self.layers.unwrap_or(c.layers);
        c.heads = self.heads.unwrap_or(c.heads);
        c.hidden = self.hidden.unwrap_or(c.hidden);
        c.max_seq_len = self.max_seq_len.unwrap_or(c.max_seq_len);
        c.mlp_multiplier = self.mlp_multiplier.unwrap_or(c.mlp_multiplier);
        c.dropout = self.dropout.unwrap_or(c.dropout);
        c.tie_head = self.tie_head.unwrap_or(c.tie_head);
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub corpus: Option<PathBuf>,
    pub test_corpus: Option<PathBuf>,
    pub validation_corpus: Option<PathBuf>,
    /// Corpus and classes for `pretrain` when they differ from the task's.
    pub pretrain_corpus: Option<PathBuf>,
    pub pretrain_classes: Vec<String>,
    /// Cap on sketches per class taken from each corpus.
    pub per_class: Option<usize>,
    pub checkpoint: Option<PathBuf>,
}

/// Everything a run needs, as read from `--config` plus flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub classes: Vec<String>,
    pub out: Option<PathBuf>,
    pub data: DataSection,
    pub abstraction: AbstractionConfig,
    pub model: ModelSection,
    pub train: TrainPlan,
    pub sampler: SamplerConfig,
    pub service: ServiceConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    /// Applies flag overrides on top of the file values.
    pub fn apply(&mut self, flags: &CommonFlags) {
        if let Some(s) = flags.seed {
            self.seed = Some(s);
        }
        if let Some(c) = &flags.classes {
            self.classes = c.clone();
        }
        if let Some(k) = flags.k_primitives {
            self.abstraction.orientations = k;
        }
        if let Some(l) = flags.prim_length {
            self.abstraction.primitive_length = l;
        }
        if let Some(m) = flags.max_seq_len {
            self.model.max_seq_len = Some(m);
        }
        if let Some(l) = flags.layers {
            self.model.layers = Some(l);
        }
        if let Some(h) = flags.heads {
            self.model.heads = Some(h);
        }
        if let Some(h) = flags.hidden {
            self.model.hidden = Some(h);
        }
        if let Some(e) = flags.epochs {
            self.train.epochs = e;
        }
        if let Some(b) = flags.batch {
            self.train.batch_size = b;
        }
        if let Some(lr) = flags.lr {
            self.train.learning_rate = lr;
        }
        if let Some(t) = flags.temperature {
            self.sampler.temperature = t;
        }
        if let Some(n) = flags.num_samples {
            self.sampler.num_samples = n;
        }
        if let Some(o) = &flags.out {
            self.out = Some(o.clone());
        }
    }

    /// Fixes the seed, drawing one when none was given, and copies it into
    /// the training and sampling sections.
    fn settle_seed(&mut self) -> u64 {
        let seed = *self.seed.get_or_insert_with(|| rand::random::<u32>() as u64);
        self.train.seed = seed;
        self.sampler.seed = seed;
        seed
    }

    fn out_dir(&self) -> CliResult<&Path> {
        self.out.as_deref().ok_or_else(|| missing("--out"))
    }

    fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.abstraction.orientations)
    }
}

/// Parses `args` (program name first) and runs the command; returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            match &e {
                CliError::Usage(m) => eprintln!("usage error: {m}"),
                CliError::Runtime(err) => eprintln!("error: {err}"),
            }
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> CliResult<()> {
    let mut config = match &cli.common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    config.apply(&cli.common);
    match cli.command {
        Command::Ingest {
            input,
            synthetic,
            jitter,
            split,
            per_class,
        } => ingest(&mut config, &input, synthetic, jitter, split, per_class),
        Command::TokenizeStats { corpus, bucket } => tokenize_stats(&mut config, corpus, bucket),
        Command::Pretrain { corpus } => {
            if cli.common.classes.is_none() && !config.data.pretrain_classes.is_empty() {
                config.classes = config.data.pretrain_classes.clone();
            }
            let corpus = corpus.or_else(|| config.data.pretrain_corpus.clone());
            pretrain_cmd(&mut config, corpus)
        }
        Command::Finetune {
            checkpoint,
            corpus,
            task,
            class,
            validation_corpus,
            freeze_backbone,
        } => finetune_cmd(
            &mut config,
            checkpoint,
            corpus,
            task,
            class,
            validation_corpus,
            freeze_backbone,
        ),
        Command::Generate { checkpoint, class } => sample_cmd(&mut config, checkpoint, class, None),
        Command::Complete {
            checkpoint,
            class,
            strokes,
        } => {
            let strokes = strokes.ok_or_else(|| missing("--strokes"))?;
            sample_cmd(&mut config, checkpoint, class, Some(strokes))
        }
        Command::Classify { checkpoint, strokes } => classify_cmd(&mut config, checkpoint, strokes),
        Command::Eval {
            checkpoint,
            corpus,
            recognizability,
        } => eval_cmd(&mut config, checkpoint, corpus, recognizability),
        Command::Ablate {
            axis,
            grid,
            corpus,
            test_corpus,
            per_class,
        } => ablate_cmd(&mut config, &axis, &grid, corpus, test_corpus, per_class),
        Command::Serve {
            bind,
            class_checkpoint,
            classifier,
        } => serve_cmd(&mut config, bind, class_checkpoint, classifier),
    }
}

fn prepare_out(config: &RunConfig) -> CliResult<PathBuf> {
    let dir = config.out_dir()?.to_path_buf();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let text = toml::to_string_pretty(config).map_err(|e| Error::Config(format!("config echo: {e}")))?;
    write_file(&dir.join("config.toml"), text.as_bytes())?;
    Ok(dir)
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::Runtime(Error::io(path, e)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    write_file(path, format!("{text}\n").as_bytes())
}

fn collect_ndjson(inputs: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "ndjson"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

fn ingest(
    config: &mut RunConfig,
    input: &[PathBuf],
    synthetic: Option<usize>,
    jitter: f64,
    split: Split,
    per_class: Option<usize>,
) -> CliResult<()> {
    let seed = config.settle_seed();
    let mut corpus = match synthetic {
        Some(n) => {
            let shapes: Vec<ShapeKind> = if config.classes.is_empty() {
                ShapeKind::ALL.to_vec()
            } else {
                config
                    .classes
                    .iter()
                    .map(|c| ShapeKind::from_str(c))
                    .collect::<crate::Result<_>>()?
            };
            synthetic_corpus(&shapes, n, jitter, seed)?.with_split(split)
        }
        None => {
            if input.is_empty() {
                return Err(missing("--input"));
            }
            let mut parts = Vec::new();
            for file in collect_ndjson(input)? {
                let outcome = parse_quickdraw_file(&file, split)?;
                for e in &outcome.errors {
                    log::warn!("{}:{}: {}", file.display(), e.line, e.message);
                }
                parts.push(outcome.corpus);
            }
            let merged = SketchCorpus::merge(parts, split)?;
            if config.classes.is_empty() {
                merged
            } else {
                merged.restrict_classes(&config.classes)?
            }
        }
    };
    if let Some(n) = per_class.or(config.data.per_class) {
        corpus = corpus.take_per_class(n);
    }
    let dir = prepare_out(config)?;
    let path = dir.join("corpus.pskc");
    save_corpus(&corpus, &path)?;
    println!(
        "wrote {} sketches over {} classes to {}",
        corpus.len(),
        corpus.class_names().len(),
        path.display()
    );
    for (name, n) in corpus.class_names().iter().zip(corpus.per_class_counts()) {
        println!("  {name}: {n}");
    }
    Ok(())
}

fn load_input_corpus(config: &RunConfig, flag: Option<PathBuf>, name: &str) -> CliResult<SketchCorpus> {
    let path = flag
        .or_else(|| config.data.corpus.clone())
        .ok_or_else(|| missing(name))?;
    select(config, load_corpus(&path)?)
}

fn select(config: &RunConfig, corpus: SketchCorpus) -> CliResult<SketchCorpus> {
    let corpus = if config.classes.is_empty() {
        corpus
    } else {
        corpus.restrict_classes(&config.classes)?
    };
    Ok(match config.data.per_class {
        Some(n) => corpus.take_per_class(n),
        None => corpus,
    })
}

fn tokenize_stats(config: &mut RunConfig, corpus: Option<PathBuf>, bucket: usize) -> CliResult<()> {
    let corpus = load_input_corpus(config, corpus, "--corpus")?;
    let max_len = config.model.resolve(&config.vocabulary())?.max_seq_len;
    let (_, _, report) = tokenize_corpus(&corpus, &config.abstraction, max_len)?;
    println!("sketches: {}", report.total);
    println!("failed: {}", report.failed.len());
    println!(
        "truncated at {max_len}: {} ({:.2}%)",
        report.truncated,
        100.0 * report.truncation_rate()
    );
    println!("length histogram (bucket {bucket}):");
    for (lo, count) in report.histogram(bucket) {
        println!("  {lo:>5}-{:<5} {count}", lo + bucket.max(1) - 1);
    }
    if config.out.is_some() {
        let dir = prepare_out(config)?;
        let summary = serde_json::json!({
            "total": report.total,
            "truncated": report.truncated,
            "truncation_rate": report.truncation_rate(),
            "max_seq_len": max_len,
            "failed": report.failed.len(),
            "histogram": report.histogram(bucket),
        });
        write_json(&dir.join("tokenize_stats.json"), &summary)?;
    }
    Ok(())
}

fn save_run<T: crate::numerics::Scalar>(dir: &Path, run: &TrainingRun<T>) -> CliResult<()> {
    let path = dir.join("metrics.ndjson");
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = BufWriter::new(file);
    write_metrics(&run.history, &mut out)?;
    out.flush().map_err(|e| Error::io(&path, e))?;
    let ckpt = dir.join("checkpoint.ckpt");
    save_checkpoint(&run.checkpoint, &ckpt)?;
    println!(
        "best epoch {:?}{}; checkpoint {}",
        run.best_epoch,
        if run.stopped_early { " (stopped early)" } else { "" },
        ckpt.display()
    );
    Ok(())
}

fn print_history<T>(run: &TrainingRun<T>) {
    for m in &run.history {
        let acc = m.top1.map(|t| format!(" top1 {:.2}%", 100.0 * t)).unwrap_or_default();
        println!(
            "epoch {:>3} {:<10} loss {:.4}{acc}",
            m.epoch,
            m.split.to_string(),
            m.loss
        );
    }
}

fn pretrain_cmd(config: &mut RunConfig, corpus: Option<PathBuf>) -> CliResult<()> {
    let corpus = load_input_corpus(config, corpus, "--corpus")?;
    config.out_dir()?;
    config.settle_seed();
    let model = config.model.resolve(&config.vocabulary())?;
    let dir = prepare_out(config)?;
    let (run, report) = pretrain::<f32>(&corpus, model, config.abstraction, &config.train)?;
    println!(
        "tokenized {} sketches, {} truncated, {} failed",
        report.total,
        report.truncated,
        report.failed.len()
    );
    print_history(&run);
    save_run(&dir, &run)
}

fn finetune_cmd(
    config: &mut RunConfig,
    checkpoint: Option<PathBuf>,
    corpus: Option<PathBuf>,
    task: FinetuneTask,
    class: Option<String>,
    validation_corpus: Option<PathBuf>,
    freeze_backbone: bool,
) -> CliResult<()> {
    let ckpt_path = checkpoint
        .or_else(|| config.data.checkpoint.clone())
        .ok_or_else(|| missing("--checkpoint"))?;
    let corpus = load_input_corpus(config, corpus, "--corpus")?;
    config.out_dir()?;
    config.settle_seed();
    config.train.freeze_backbone |= freeze_backbone;
    let ckpt = load_checkpoint::<f32>(&ckpt_path)?;
    let run = match task {
        FinetuneTask::Completion => {
            let class = class.ok_or_else(|| missing("--class"))?;
            let single = corpus.restrict_classes(std::slice::from_ref(&class))?;
            let dir = prepare_out(config)?;
            let run = finetune_completion(ckpt, &single, &config.train)?;
            print_history(&run);
            return save_run(&dir, &run);
        }
        FinetuneTask::Classify => {
            let max_len = ckpt.model.config().max_seq_len;
            let (data, _) = LabeledDataset::from_corpus(&corpus, &ckpt.abstraction, max_len)?;
            let validation = match validation_corpus.or_else(|| config.data.validation_corpus.clone()) {
                Some(p) => {
                    let v = load_corpus(&p)?.restrict_classes(data.class_names())?;
                    Some(LabeledDataset::from_corpus(&v, &ckpt.abstraction, max_len)?.0)
                }
                None => None,
            };
            prepare_out(config)?;
            finetune_classify(ckpt, &data, validation.as_ref(), &config.train)?
        }
    };
    print_history(&run);
    save_run(config.out_dir()?, &run)
}

/// Checkpoint from `--checkpoint`, `[data] checkpoint`, or the class map
/// of `[service.checkpoints]`.
fn resolve_checkpoint(config: &RunConfig, checkpoint: Option<PathBuf>, class: Option<&str>) -> CliResult<PathBuf> {
    if let Some(p) = checkpoint {
        return Ok(p);
    }
    if let Some(c) = class {
        return config
            .service
            .checkpoints
            .get(c)
            .cloned()
            .ok_or_else(|| CliError::Usage(format!("no checkpoint configured for class `{c}`; pass --checkpoint")));
    }
    config.data.checkpoint.clone().ok_or_else(|| missing("--checkpoint"))
}

fn read_strokes(path: &Path) -> CliResult<Vec<Stroke3Point>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows: Vec<[f64; 3]> = serde_json::from_str(&text).map_err(Error::from)?;
    rows.iter()
        .map(|&[dx, dy, pen]| match pen {
            p if p == 0.0 || p == 1.0 => Ok(Stroke3Point::new(dx, dy, p == 1.0)),
            _ => Err(CliError::Runtime(Error::InvalidSketch(format!(
                "pen value {pen} is not 0 or 1"
            )))),
        })
        .collect()
}

fn sample_cmd(
    config: &mut RunConfig,
    checkpoint: Option<PathBuf>,
    class: Option<String>,
    strokes: Option<PathBuf>,
) -> CliResult<()> {
    let path = resolve_checkpoint(config, checkpoint, class.as_deref())?;
    let points = match &strokes {
        Some(p) => read_strokes(p)?,
        None => Vec::new(),
    };
    let seed = config.settle_seed();
    config.sampler.validate()?;
    let ckpt = load_checkpoint::<f32>(&path)?;
    let px = config.service.canvas_px;
    let response = complete_sketch(&ckpt, &points, &config.sampler, px, config.service.stroke_width)?;
    match &config.out {
        Some(_) => {
            let dir = prepare_out(config)?;
            for (i, c) in response.completions.iter().enumerate() {
                write_file(&dir.join(format!("sample_{i}.svg")), c.svg.as_bytes())?;
            }
            write_json(&dir.join("samples.json"), &response)?;
            println!(
                "seed {seed}: wrote {} samples to {}",
                response.completions.len(),
                dir.display()
            );
        }
        None => {
            let text = serde_json::to_string_pretty(&response).map_err(Error::from)?;
            println!("{text}");
        }
    }
    Ok(())
}

fn classify_cmd(config: &mut RunConfig, checkpoint: Option<PathBuf>, strokes: Option<PathBuf>) -> CliResult<()> {
    let strokes = strokes.ok_or_else(|| missing("--strokes"))?;
    let path = checkpoint
        .or_else(|| config.service.classifier.clone())
        .or_else(|| config.data.checkpoint.clone())
        .ok_or_else(|| missing("--checkpoint"))?;
    let points = read_strokes(&strokes)?;
    let ckpt = load_checkpoint::<f32>(&path)?;
    let ranked = classify_sketch(&ckpt, &points)?;
    for c in ranked.iter().take(crate::service::CLASSIFY_TOP_K) {
        println!("{:<24} {:.4}", c.class, c.probability);
    }
    if config.out.is_some() {
        let dir = prepare_out(config)?;
        write_json(&dir.join("classify.json"), &ranked)?;
    }
    Ok(())
}

fn eval_cmd(
    config: &mut RunConfig,
    checkpoint: Option<PathBuf>,
    corpus: Option<PathBuf>,
    recog: bool,
) -> CliResult<()> {
    let path = checkpoint
        .or_else(|| config.service.classifier.clone())
        .or_else(|| config.data.checkpoint.clone())
        .ok_or_else(|| missing("--checkpoint"))?;
    let classifier = load_checkpoint::<f32>(&path)?;
    let report = if recog {
        if config.service.checkpoints.is_empty() {
            return Err(CliError::Usage(
                "recognizability needs [service.checkpoints] per class".into(),
            ));
        }
        config.settle_seed();
        let mut loaded: Vec<(String, Checkpoint<f32>)> = Vec::new();
        for (class, p) in &config.service.checkpoints {
            loaded.push((class.clone(), load_checkpoint::<f32>(p)?));
        }
        let generators: Vec<(String, &Model<f32>)> = loaded.iter().map(|(c, k)| (c.clone(), &k.model)).collect();
        recognizability(&generators, &classifier, config.sampler.num_samples, &config.sampler)?
    } else {
        let path = corpus
            .or_else(|| config.data.test_corpus.clone())
            .or_else(|| config.data.corpus.clone())
            .ok_or_else(|| missing("--corpus"))?;
        let corpus = load_corpus(&path)?.restrict_classes(&classifier.class_names)?;
        let corpus = match config.data.per_class {
            Some(n) => corpus.take_per_class(n),
            None => corpus,
        };
        let max_len = classifier.model.config().max_seq_len;
        let (data, _) = LabeledDataset::from_corpus(&corpus, &classifier.abstraction, max_len)?;
        evaluate_classifier(&classifier, &data)?
    };
    println!("samples {}", report.count);
    println!("top1 {:.2}%", 100.0 * report.top1);
    println!("top5 {:.2}%", 100.0 * report.top5);
    if config.out.is_some() {
        let dir = prepare_out(config)?;
        write_json(&dir.join("eval.json"), &report)?;
    }
    Ok(())
}

fn ablate_cmd(
    config: &mut RunConfig,
    axis: &str,
    grid: &str,
    corpus: Option<PathBuf>,
    test_corpus: Option<PathBuf>,
    per_class: Option<usize>,
) -> CliResult<()> {
    let axis = AblationAxis::from_str(axis).map_err(|e| CliError::Usage(e.to_string()))?;
    let points: Vec<GridPoint> = grid
        .split(',')
        .map(|g| GridPoint::parse(axis, g))
        .collect::<crate::Result<_>>()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let train = load_input_corpus(config, corpus, "--corpus")?;
    let test_path = test_corpus
        .or_else(|| config.data.test_corpus.clone())
        .ok_or_else(|| missing("--test-corpus"))?;
    let test = load_corpus(&test_path)?;
    config.out_dir()?;
    config.settle_seed();
    let base = AblationBase {
        model: config.model.resolve(&config.vocabulary())?,
        abstraction: config.abstraction,
        plan: config.train.clone(),
        classes: if config.classes.is_empty() {
            train.class_names().len()
        } else {
            config.classes.len()
        },
        per_class: per_class.or(config.data.per_class).unwrap_or(1000),
    };
    let dir = prepare_out(config)?;
    let table = ablation_runner(axis, &points, &train, &test, &base)?;
    print!("{}", table.to_text());
    write_file(&dir.join("ablation.json"), table.to_json()?.as_bytes())?;
    write_file(&dir.join("ablation.csv"), table.to_csv().as_bytes())?;
    write_file(&dir.join("ablation.txt"), table.to_text().as_bytes())?;
    Ok(())
}

fn serve_cmd(
    config: &mut RunConfig,
    bind: Option<String>,
    class_checkpoint: Vec<(String, PathBuf)>,
    classifier: Option<PathBuf>,
) -> CliResult<()> {
    let mut service = config.service.clone();
    if let Some(b) = bind {
        service.bind = b;
    }
    service
        .checkpoints
        .extend(class_checkpoint.into_iter().collect::<BTreeMap<_, _>>());
    if classifier.is_some() {
        service.classifier = classifier;
    }
    if service.checkpoints.is_empty() && service.classifier.is_none() {
        return Err(missing("--class-checkpoint or --classifier"));
    }
    config.service = service.clone();
    if config.out.is_some() {
        prepare_out(config)?;
    }
    let state = Arc::new(ServiceState::new(service)?);
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Error::io("<tokio runtime>", e))?;
    runtime.block_on(serve(state))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("primsketch").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_file_values() {
        let text =
            "seed = 3\nclasses = [\"cat\"]\n[model]\nlayers = 2\n[train]\nepochs = 7\n[sampler]\ntemperature = 0.8\n";
        let mut config: RunConfig = toml::from_str(text).unwrap();
        let cli = parse(&[
            "generate",
            "--seed",
            "9",
            "--layers",
            "6",
            "--temperature",
            "1.2",
            "--classes",
            "a,b",
        ]);
        config.apply(&cli.common);
        assert_eq!(config.seed, Some(9));
        assert_eq!(config.model.layers, Some(6));
        assert_eq!(config.train.epochs, 7);
        assert_eq!(config.sampler.temperature, 1.2);
        assert_eq!(config.classes, ["a", "b"]);
    }

    #[test]
    fn every_flag_reaches_the_config() {
        let cli = parse(&[
            "pretrain",
            "--seed",
            "1",
            "--classes",
            "x",
            "--k-primitives",
            "12",
            "--prim-length",
            "0.1",
            "--max-seq-len",
            "64",
            "--layers",
            "1",
            "--heads",
            "2",
            "--hidden",
            "8",
            "--epochs",
            "3",
            "--batch",
            "4",
            "--lr",
            "0.01",
            "--temperature",
            "0.5",
            "--num-samples",
            "2",
            "--out",
            "o",
        ]);
        let mut c = RunConfig::default();
        c.apply(&cli.common);
        let echoed: RunConfig = toml::from_str(&toml::to_string_pretty(&c).unwrap()).unwrap();
        assert_eq!(echoed, c);
        assert_eq!(
            (
                c.abstraction.orientations,
                c.abstraction.primitive_length,
                c.model.max_seq_len
            ),
            (12, 0.1, Some(64))
        );
        assert_eq!(
            (c.model.layers, c.model.heads, c.model.hidden),
            (Some(1), Some(2), Some(8))
        );
        assert_eq!(
            (c.train.epochs, c.train.batch_size, c.train.learning_rate),
            (3, 4, 0.01)
        );
        assert_eq!((c.sampler.temperature, c.sampler.num_samples), (0.5, 2));
        assert_eq!(c.out.as_deref(), Some(Path::new("o")));
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[model]\nlayerz = 2\n").is_err());
    }

    #[test]
    fn model_section_resolves_preset() {
        let vocab = Vocabulary::new(36);
        let m = ModelSection {
            hidden: Some(64),
            ..ModelSection::default()
        }
        .resolve(&vocab)
        .unwrap();
        assert_eq!((m.layers, m.heads, m.hidden, m.vocab_size), (4, 4, 64, 40));
        let bad = ModelSection {
            preset: "huge".into(),
            ..ModelSection::default()
        };
        assert!(bad.resolve(&vocab).is_err());
    }

    #[test]
    fn seed_is_settled_once() {
        let mut c = RunConfig::default();
        let s = c.settle_seed();
        assert_eq!(c.seed, Some(s));
        assert_eq!((c.train.seed, c.sampler.seed), (s, s));
        assert_eq!(c.settle_seed(), s);
    }

    #[test]
    fn missing_corpus_is_a_usage_error() {
        let err = execute(parse(&["pretrain", "--out", "/nonexistent/x"])).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_USAGE);
        assert!(err.to_string().contains("--corpus"));
    }

    #[test]
    fn assignment_parser() {
        assert_eq!(
            parse_assignment("cat=a.ckpt").unwrap(),
            ("cat".into(), PathBuf::from("a.ckpt"))
        );
        assert!(parse_assignment("cat").is_err());
    }
}
