//! Next-token pre-training, per-class fine-tuning, classification
//! fine-tuning and checkpoint files.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::topk_accuracy;
use crate::model::{Model, ModelConfig};
use crate::numerics::{
    adam_step, clip_grad_norm, AdamConfig, AdamState, DType, ParamStore, Scalar, Tape, Tensor, Var, WarmupSchedule,
};
use crate::primitives::{AbstractionConfig, PrimitiveDictionary};
use crate::stroke_data::{ByteReader, SketchCorpus, Split};
use crate::tokenizer::{pad_or_truncate, tokenize_sketch, TokenId, TokenSequence, Vocabulary};

/// Tokenized sketches with class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    examples: Vec<(TokenSequence, usize)>,
    class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn new(examples: Vec<(TokenSequence, usize)>, class_names: Vec<String>) -> Result<Self> {
        if let Some((_, y)) = examples.iter().find(|(_, y)| *y >= class_names.len()) {
            return Err(Error::Data(format!(
                "label {y} out of range for {} classes",
                class_names.len()
            )));
        }
        Ok(Self { examples, class_names })
    }

    /// Tokenizes every labeled sketch, truncating at `max_len`.
    pub fn from_corpus(
        corpus: &SketchCorpus,
        abstraction: &AbstractionConfig,
        max_len: usize,
    ) -> Result<(Self, TokenizeReport)> {
        let (seqs, labels, report) = tokenize_corpus(corpus, abstraction, max_len)?;
        let mut examples = Vec::with_capacity(seqs.len());
        for (seq, label) in seqs.into_iter().zip(labels) {
            let label = label.ok_or_else(|| Error::Data("unlabeled sketch in a classification corpus".into()))?;
            examples.push((seq, label));
        }
        Ok((Self::new(examples, corpus.class_names().to_vec())?, report))
    }

    pub fn examples(&self) -> &[(TokenSequence, usize)] {
        &self.examples
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
            class_names: self.class_names.clone(),
        }
    }

    /// Relabels class `c` as `perm[c]`.
    pub fn permute_labels(&self, perm: &[usize]) -> Result<Self> {
        let mut names = vec![String::new(); self.class_names.len()];
        for (c, &p) in perm.iter().enumerate() {
            names[p] = self.class_names[c].clone();
        }
        Self::new(
            self.examples.iter().map(|(s, y)| (s.clone(), perm[*y])).collect(),
            names,
        )
    }
}

/// Outcome of tokenizing a corpus at a fixed context length.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenizeReport {
    pub total: usize,
    pub truncated: usize,
    /// Index and reason for every sketch that could not be tokenized.
    pub failed: Vec<(usize, String)>,
    /// Token count of every sketch before truncation.
    pub lengths: Vec<usize>,
}

impl TokenizeReport {
    pub fn truncation_rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.truncated as f64 / self.total as f64
        }
    }

    /// Counts of lengths in buckets of `width` tokens, as (lower bound, count).
    pub fn histogram(&self, width: usize) -> Vec<(usize, usize)> {
        let width = width.max(1);
        let Some(&max) = self.lengths.iter().max() else {
            return Vec::new();
        };
        let mut bins = vec![0usize; max / width + 1];
        for &l in &self.lengths {
            bins[l / width] += 1;
        }
        bins.into_iter().enumerate().map(|(i, c)| (i * width, c)).collect()
    }
}

/// Tokenizes every sketch, truncating to `max_len` tokens. Returned
/// sequences carry no padding; sketches that fail to tokenize are skipped
/// and reported.
pub fn tokenize_corpus(
    corpus: &SketchCorpus,
    abstraction: &AbstractionConfig,
    max_len: usize,
) -> Result<(Vec<TokenSequence>, Vec<Option<usize>>, TokenizeReport)> {
    let dict = abstraction.dictionary()?;
    let vocab = Vocabulary::for_dictionary(&dict);
    let mut report = TokenizeReport::default();
    let mut seqs = Vec::with_capacity(corpus.len());
    let mut labels = Vec::with_capacity(corpus.len());
    for (i, sketch) in corpus.sketches().iter().enumerate() {
        report.total += 1;
        match tokenize_sketch(sketch, &dict, &vocab) {
            Ok(seq) => {
                report.lengths.push(seq.len());
                let (cut, truncated) = pad_or_truncate(&seq, max_len, &vocab);
                report.truncated += usize::from(truncated);
                let content = cut.ids()[..cut.attention_length()].to_vec();
                seqs.push(TokenSequence::from_ids(content, vocab.pad()));
                labels.push(sketch.label().and_then(|l| corpus.class_index(l)));
            }
            Err(e) => report.failed.push((i, e.to_string())),
        }
    }
    Ok((seqs, labels, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainPlan {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub clip_norm: f64,
    pub patience: usize,
    pub validation_fraction: f64,
    pub seed: u64,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    /// Train only the classification head.
    pub freeze_backbone: bool,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: AdamConfig::default().learning_rate,
            warmup_fraction: 0.05,
            clip_norm: 1.0,
            patience: 5,
            validation_fraction: 0.1,
            seed: 0,
            max_steps: None,
            freeze_backbone: false,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.patience < 1 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "validation fraction {} outside [0, 1)",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

/// Seed-stable split of `n` items into (train, validation) index lists.
pub fn split_validation(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    order.shuffle(&mut rng);
    let held = ((n as f64) * fraction).round() as usize;
    let validation = order[..held].to_vec();
    let mut train = order[held..].to_vec();
    train.sort_unstable();
    let mut validation = validation;
    validation.sort_unstable();
    (train, validation)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub stop: bool,
    /// Zero-based index of the best value; ties keep the earliest.
    pub best_epoch: usize,
}

/// Stops once the best value is `patience` epochs old.
pub fn early_stop(history: &[f64], patience: usize, direction: Direction) -> Option<StopDecision> {
    let mut best = 0;
    for (i, &v) in history.iter().enumerate().skip(1) {
        let better = match direction {
            Direction::Minimize => v < history[best],
            Direction::Maximize => v > history[best],
        };
        if better {
            best = i;
        }
    }
    (!history.is_empty()).then(|| StopDecision {
        stop: history.len() - 1 - best >= patience,
        best_epoch: best,
    })
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub top1: Option<f64>,
    pub top5: Option<f64>,
    pub wall_ms: u64,
}

pub fn write_metrics(records: &[EpochMetrics], out: &mut impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io("<metrics>", e))?;
    }
    Ok(())
}

/// A model plus everything needed to resume training or run inference.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub abstraction: AbstractionConfig,
    /// Classes the model was trained on: the classifier's label order, or
    /// the single class of a completion model.
    pub class_names: Vec<String>,
    pub optimizer: AdamState,
    pub epoch: usize,
    pub best_metric: Option<f64>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(model: Model<T>, abstraction: AbstractionConfig) -> Result<Self> {
        if model.config().vocab_size != abstraction.orientations + 4 {
            return Err(Error::CheckpointMismatch {
                field: "vocab_size".into(),
                found: model.config().vocab_size.to_string(),
                expected: (abstraction.orientations + 4).to_string(),
            });
        }
        let optimizer = AdamState::new(model.params());
        Ok(Self {
            model,
            abstraction,
            class_names: Vec::new(),
            optimizer,
            epoch: 0,
            best_metric: None,
        })
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.abstraction.orientations)
    }

    pub fn dictionary(&self) -> Result<PrimitiveDictionary> {
        self.abstraction.dictionary()
    }

    /// Fails with the first field where the stored model differs.
    pub fn ensure_config(&self, expected: &ModelConfig) -> Result<()> {
        let found = self.model.config();
        let fields = [
            ("layers", found.layers.to_string(), expected.layers.to_string()),
            ("heads", found.heads.to_string(), expected.heads.to_string()),
            ("hidden", found.hidden.to_string(), expected.hidden.to_string()),
            (
                "max_seq_len",
                found.max_seq_len.to_string(),
                expected.max_seq_len.to_string(),
            ),
            (
                "vocab_size",
                found.vocab_size.to_string(),
                expected.vocab_size.to_string(),
            ),
            (
                "num_classes",
                format!("{:?}", found.num_classes),
                format!("{:?}", expected.num_classes),
            ),
            (
                "mlp_multiplier",
                found.mlp_multiplier.to_string(),
                expected.mlp_multiplier.to_string(),
            ),
            ("tie_head", found.tie_head.to_string(), expected.tie_head.to_string()),
        ];
        match fields.into_iter().find(|(_, f, e)| f != e) {
            Some((field, found, expected)) => Err(Error::CheckpointMismatch {
                field: field.into(),
                found,
                expected,
            }),
            None => Ok(()),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Checkpoint<U> {
        Checkpoint {
            model: self.model.cast(),
            abstraction: self.abstraction,
            class_names: self.class_names.clone(),
            optimizer: self.optimizer.clone(),
            epoch: self.epoch,
            best_metric: self.best_metric,
        }
    }
}

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"PSKTCKPT";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    dtype: DType,
    model: ModelConfig,
    abstraction: AbstractionConfig,
    class_names: Vec<String>,
    epoch: usize,
    best_metric: Option<f64>,
    optimizer_step: u64,
    params: Vec<ParamEntry>,
}

pub fn encode_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>) -> Result<Vec<u8>> {
    let params = ckpt.model.params();
    let header = CheckpointHeader {
        format_version: CHECKPOINT_FORMAT_VERSION,
        dtype: T::DTYPE,
        model: ckpt.model.config().clone(),
        abstraction: ckpt.abstraction,
        class_names: ckpt.class_names.clone(),
        epoch: ckpt.epoch,
        best_metric: ckpt.best_metric,
        optimizer_step: ckpt.optimizer.step,
        params: params
            .iter()
            .map(|(_, p)| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + params.scalar_count() * (T::DTYPE.size() + 16));
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in params.iter() {
        for v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    let moments_present = ckpt.optimizer.first.len() == params.len();
    out.push(u8::from(moments_present));
    if moments_present {
        for (m, v) in ckpt.optimizer.first.iter().zip(&ckpt.optimizer.second) {
            for x in m.iter().chain(v) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Checkpoint<T>> {
    let mut r = ByteReader::new(bytes, path);
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::corrupt(path, "bad magic bytes"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: CHECKPOINT_FORMAT_VERSION,
        });
    }
    let header_len = r.u32()? as usize;
    let header: CheckpointHeader =
        serde_json::from_slice(r.take(header_len)?).map_err(|e| Error::corrupt(path, format!("header: {e}")))?;
    let width = header.dtype.size();
    let mut store = ParamStore::<T>::new();
    for entry in &header.params {
        let n: usize = entry.shape.iter().product();
        let raw = r.take(n * width)?;
        let data: Vec<T> = match header.dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
        };
        let id = store.add(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
        store.get_mut(id).trainable = entry.trainable;
    }
    let mut optimizer = AdamState {
        step: header.optimizer_step,
        ..AdamState::default()
    };
    if r.u8()? == 1 {
        for entry in &header.params {
            let n: usize = entry.shape.iter().product();
            let read = |r: &mut ByteReader| -> Result<Vec<f64>> { (0..n).map(|_| r.f64()).collect() };
            let m = read(&mut r)?;
            let v = read(&mut r)?;
            optimizer.first.push(m);
            optimizer.second.push(v);
        }
    }
    if !r.is_done() {
        return Err(Error::corrupt(path, "trailing bytes after payload"));
    }
    let model = Model::from_params(header.model, store)?;
    Ok(Checkpoint {
        model,
        abstraction: header.abstraction,
        class_names: header.class_names,
        optimizer,
        epoch: header.epoch,
        best_metric: header.best_metric,
    })
}

pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint, converting stored values to `T` if the file was
/// written at another precision.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

/// Result of a training call: the best checkpoint and the full record.
#[derive(Debug, Clone)]
pub struct TrainingRun<T> {
    pub checkpoint: Checkpoint<T>,
    pub history: Vec<EpochMetrics>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl<T: Scalar> TrainingRun<T> {
    fn unchanged(checkpoint: Checkpoint<T>) -> Self {
        Self {
            checkpoint,
            history: Vec::new(),
            step_losses: Vec::new(),
            best_epoch: None,
            stopped_early: false,
        }
    }

    pub fn split_history(&self, split: Split) -> Vec<&EpochMetrics> {
        self.history.iter().filter(|m| m.split == split).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Objective {
    NextToken,
    Classify,
}

struct Example<'a> {
    ids: &'a [TokenId],
    label: usize,
}

fn next_token_targets(seqs: &[&[TokenId]], pad: TokenId) -> Vec<usize> {
    let mut targets = Vec::with_capacity(seqs.iter().map(|s| s.len()).sum());
    for s in seqs {
        targets.extend(s[1..].iter().map(|&t| t as usize));
        targets.push(pad as usize);
    }
    targets
}

/// Mean next-token NLL of one packed batch, PAD targets excluded.
pub fn lm_batch_loss<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    seqs: &[&[TokenId]],
    dropout: Option<&mut dyn RngCore>,
) -> Result<Var> {
    let vocab = model.vocabulary();
    let batch = model.batch(seqs)?;
    let hidden = model.hidden(tape, &batch, dropout)?;
    let logits = model.lm_logits(tape, hidden)?;
    tape.cross_entropy(
        logits,
        &next_token_targets(seqs, vocab.pad()),
        Some(vocab.pad() as usize),
    )
}

/// Token-weighted mean next-token NLL over `seqs`.
pub fn evaluate_lm<T: Scalar>(model: &Model<T>, seqs: &[&[TokenId]], batch_size: usize) -> Result<f64> {
    let pad = model.vocabulary().pad();
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in seqs.chunks(batch_size.max(1)) {
        let n = next_token_targets(chunk, pad)
            .iter()
            .filter(|&&t| t != pad as usize)
            .count();
        if n == 0 {
            continue;
        }
        let mut tape = Tape::new();
        let loss = lm_batch_loss(model, &mut tape, chunk, None)?;
        total += tape.value(loss).item().to_f64().unwrap() * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::NoContributingPositions);
    }
    Ok(total / count as f64)
}

/// Class logits for every sequence, one row each.
pub fn classify_all<T: Scalar>(model: &Model<T>, seqs: &[&[TokenId]], batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(batch_size.max(1)) {
        let batch = model.batch(chunk)?;
        let z = model.forward_classify_batch(&batch)?;
        let (_, c) = z.matrix_dims();
        rows.extend(z.to_f64_vec().chunks(c).map(|r| r.to_vec()));
    }
    Ok(rows)
}

fn classify_loss<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    examples: &[&Example],
    dropout: Option<&mut dyn RngCore>,
) -> Result<Var> {
    let seqs: Vec<&[TokenId]> = examples.iter().map(|e| e.ids).collect();
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let batch = model.batch(&seqs)?;
    let hidden = model.hidden(tape, &batch, dropout)?;
    let z = model.class_logits(tape, hidden, &batch, &model.vocabulary())?;
    tape.cross_entropy(z, &labels, None)
}

fn validation_metrics<T: Scalar>(
    model: &Model<T>,
    examples: &[Example],
    objective: Objective,
    batch_size: usize,
) -> Result<(f64, Option<f64>, Option<f64>)> {
    let seqs: Vec<&[TokenId]> = examples.iter().map(|e| e.ids).collect();
    match objective {
        Objective::NextToken => Ok((evaluate_lm(model, &seqs, batch_size)?, None, None)),
        Objective::Classify => {
            let logits = classify_all(model, &seqs, batch_size)?;
            let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
            let loss = logits
                .iter()
                .zip(&labels)
                .map(|(row, &y)| {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                    lse - row[y]
                })
                .sum::<f64>()
                / labels.len() as f64;
            let classes = logits.first().map_or(1, |r| r.len());
            let top1 = topk_accuracy(&logits, &labels, 1)?;
            let top5 = topk_accuracy(&logits, &labels, 5.min(classes))?;
            Ok((loss, Some(top1), Some(top5)))
        }
    }
}

fn run_training<T: Scalar>(
    mut ckpt: Checkpoint<T>,
    train: &[Example],
    validation: &[Example],
    plan: &TrainPlan,
    objective: Objective,
) -> Result<TrainingRun<T>> {
    plan.validate()?;
    if plan.epochs == 0 {
        return Ok(TrainingRun::unchanged(ckpt));
    }
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    ckpt.model.freeze_backbone(plan.freeze_backbone);
    let per_epoch = train.len().div_ceil(plan.batch_size);
    let total_steps = plan
        .max_steps
        .unwrap_or(plan.epochs * per_epoch)
        .min(plan.epochs * per_epoch);
    let schedule = WarmupSchedule::new(plan.learning_rate, total_steps as u64, plan.warmup_fraction);
    let adam = AdamConfig {
        learning_rate: plan.learning_rate,
        ..AdamConfig::default()
    };
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(plan.seed);
    dropout_rng.set_stream(1);
    let use_dropout = ckpt.model.config().dropout > 0.0;

    let mut run = TrainingRun::unchanged(ckpt.clone());
    let mut metric_history = Vec::new();
    let direction = match (objective, validation.is_empty()) {
        (Objective::Classify, false) => Direction::Maximize,
        _ => Direction::Minimize,
    };
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..plan.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut batch_losses = Vec::with_capacity(per_epoch);
        for chunk in order.chunks(plan.batch_size) {
            if step >= total_steps {
                break;
            }
            let examples: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let mut tape = Tape::new();
            let dropout: Option<&mut dyn RngCore> = if use_dropout { Some(&mut dropout_rng) } else { None };
            let loss = match objective {
                Objective::NextToken => {
                    let seqs: Vec<&[TokenId]> = examples.iter().map(|e| e.ids).collect();
                    lm_batch_loss(&ckpt.model, &mut tape, &seqs, dropout)?
                }
                Objective::Classify => classify_loss(&ckpt.model, &mut tape, &examples, dropout)?,
            };
            let value = tape.value(loss).item().to_f64().unwrap();
            if !value.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            let params = ckpt.model.params_mut();
            params.zero_grad();
            tape.backward(loss, params)?;
            drop(tape);
            for p in params.iter_mut() {
                if p.trainable && p.grad.is_none() {
                    p.grad = Some(Tensor::zeros(p.value.shape()));
                }
            }
            clip_grad_norm(params, plan.clip_norm);
            adam_step(params, &mut ckpt.optimizer, &adam, schedule.rate(step as u64))?;
            batch_losses.push(value);
            run.step_losses.push(value);
            step += 1;
        }
        if batch_losses.is_empty() {
            break;
        }
        ckpt.epoch += 1;
        let train_loss = batch_losses.iter().sum::<f64>() / batch_losses.len() as f64;
        let mut train_record = EpochMetrics {
            epoch,
            split: Split::Train,
            loss: train_loss,
            top1: None,
            top5: None,
            wall_ms: 0,
        };
        let metric = if validation.is_empty() {
            train_loss
        } else {
            let (loss, top1, top5) = validation_metrics(&ckpt.model, validation, objective, plan.batch_size)?;
            train_record.wall_ms = started.elapsed().as_millis() as u64;
            run.history.push(train_record.clone());
            run.history.push(EpochMetrics {
                epoch,
                split: Split::Validation,
                loss,
                top1,
                top5,
                wall_ms: started.elapsed().as_millis() as u64,
            });
            top1.unwrap_or(loss)
        };
        if validation.is_empty() {
            train_record.wall_ms = started.elapsed().as_millis() as u64;
            run.history.push(train_record);
        }
        log::info!("epoch {epoch}: train loss {train_loss:.4}, metric {metric:.4}");
        metric_history.push(metric);
        let decision = early_stop(&metric_history, plan.patience, direction).expect("non-empty history");
        if decision.best_epoch == epoch {
            ckpt.best_metric = Some(metric);
            run.checkpoint = ckpt.clone();
            run.best_epoch = Some(epoch);
        }
        if decision.stop {
            run.stopped_early = true;
            break;
        }
        if step >= total_steps {
            break;
        }
    }
    Ok(run)
}

fn examples_of(seqs: &[TokenSequence]) -> Vec<Example<'_>> {
    seqs.iter().map(|s| Example { ids: s.ids(), label: 0 }).collect()
}

/// Next-token training of `model` on pre-tokenized sequences.
pub fn pretrain_sequences<T: Scalar>(
    checkpoint: Checkpoint<T>,
    train: &[TokenSequence],
    validation: &[TokenSequence],
    plan: &TrainPlan,
) -> Result<TrainingRun<T>> {
    run_training(
        checkpoint,
        &examples_of(train),
        &examples_of(validation),
        plan,
        Objective::NextToken,
    )
}

/// Next-token pre-training over every class of `corpus` from a fresh model.
pub fn pretrain<T: Scalar>(
    corpus: &SketchCorpus,
    config: ModelConfig,
    abstraction: AbstractionConfig,
    plan: &TrainPlan,
) -> Result<(TrainingRun<T>, TokenizeReport)> {
    if corpus.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    let (seqs, _, report) = tokenize_corpus(corpus, &abstraction, config.max_seq_len)?;
    let (tr, va) = split_validation(seqs.len(), plan.validation_fraction, plan.seed);
    let train: Vec<TokenSequence> = tr.iter().map(|&i| seqs[i].clone()).collect();
    let validation: Vec<TokenSequence> = va.iter().map(|&i| seqs[i].clone()).collect();
    let mut ckpt = Checkpoint::new(Model::new(config, plan.seed)?, abstraction)?;
    ckpt.class_names = corpus.class_names().to_vec();
    Ok((pretrain_sequences(ckpt, &train, &validation, plan)?, report))
}

/// Continues next-token training on a single class.
pub fn finetune_completion<T: Scalar>(
    checkpoint: Checkpoint<T>,
    class_corpus: &SketchCorpus,
    plan: &TrainPlan,
) -> Result<TrainingRun<T>> {
    let mut labels: Vec<&str> = class_corpus.sketches().iter().filter_map(|s| s.label()).collect();
    labels.sort_unstable();
    labels.dedup();
    if labels.len() > 1 {
        return Err(Error::Data(format!(
            "completion fine-tuning needs a single class, got {}",
            labels.join(", ")
        )));
    }
    if plan.epochs == 0 {
        return Ok(TrainingRun::unchanged(checkpoint));
    }
    let (seqs, _, _) = tokenize_corpus(
        class_corpus,
        &checkpoint.abstraction,
        checkpoint.model.config().max_seq_len,
    )?;
    let (tr, va) = split_validation(seqs.len(), plan.validation_fraction, plan.seed);
    let train: Vec<TokenSequence> = tr.iter().map(|&i| seqs[i].clone()).collect();
    let validation: Vec<TokenSequence> = va.iter().map(|&i| seqs[i].clone()).collect();
    let mut ckpt = checkpoint;
    ckpt.class_names = labels.iter().map(|s| s.to_string()).collect();
    ckpt.optimizer = AdamState::new(ckpt.model.params());
    ckpt.epoch = 0;
    ckpt.best_metric = None;
    pretrain_sequences(ckpt, &train, &validation, plan)
}

/// Trains the classification head and, unless frozen, the backbone.
///
/// A model without a head gets a fresh one sized for `data`. Without an
/// explicit `validation` set a seed-stable fraction of `data` is held out.
pub fn finetune_classify<T: Scalar>(
    checkpoint: Checkpoint<T>,
    data: &LabeledDataset,
    validation: Option<&LabeledDataset>,
    plan: &TrainPlan,
) -> Result<TrainingRun<T>> {
    let classes = data.class_names().len();
    let mut ckpt = checkpoint;
    match ckpt.model.config().num_classes {
        Some(n) if !ckpt.class_names.is_empty() => {
            if let Some(missing) = data.class_names().iter().find(|c| !ckpt.class_names.contains(c)) {
                return Err(Error::Data(format!("class `{missing}` is not known to the checkpoint")));
            }
            if ckpt.class_names != data.class_names() || n != classes {
                return Err(Error::Data("class order differs from the checkpoint".into()));
            }
        }
        Some(n) if n == classes => {}
        _ => ckpt.model = ckpt.model.with_classifier(classes)?,
    }
    ckpt.class_names = data.class_names().to_vec();
    ckpt.optimizer = AdamState::new(ckpt.model.params());
    ckpt.epoch = 0;
    ckpt.best_metric = None;
    let (train, held): (LabeledDataset, LabeledDataset) = match validation {
        Some(v) => (data.clone(), v.clone()),
        None => {
            let (tr, va) = split_validation(data.len(), plan.validation_fraction, plan.seed);
            (data.subset(&tr), data.subset(&va))
        }
    };
    let to_examples = |d: &LabeledDataset| -> Vec<(Vec<TokenId>, usize)> {
        d.examples().iter().map(|(s, y)| (s.ids().to_vec(), *y)).collect()
    };
    let (tr, va) = (to_examples(&train), to_examples(&held));
    let tr: Vec<Example> = tr.iter().map(|(ids, y)| Example { ids, label: *y }).collect();
    let va: Vec<Example> = va.iter().map(|(ids, y)| Example { ids, label: *y }).collect();
    run_training(ckpt, &tr, &va, plan, Objective::Classify)
}
