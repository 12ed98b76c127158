//! Accuracy metrics, recognizability of generated sketches and ablation
//! sweeps.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::Scalar;
use crate::primitives::AbstractionConfig;
use crate::sampling::{generate, SamplerConfig};
use crate::stroke_data::SketchCorpus;
use crate::tokenizer::TokenId;
use crate::training::{classify_all, finetune_classify, Checkpoint, LabeledDataset, TrainPlan};

/// Fraction of rows whose label ranks among the `k` highest logits. Ties
/// rank the lower class index first.
pub fn topk_accuracy(logits: &[Vec<f64>], labels: &[usize], k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if logits.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "topk_accuracy",
            lhs: vec![logits.len()],
            rhs: vec![labels.len()],
        });
    }
    if logits.is_empty() {
        return Err(Error::Data("no rows to score".into()));
    }
    let mut hits = 0usize;
    for (row, &y) in logits.iter().zip(labels) {
        if k > row.len() {
            return Err(Error::Config(format!("k = {k} exceeds {} classes", row.len())));
        }
        if y >= row.len() {
            return Err(Error::IndexOutOfRange {
                index: y,
                extent: row.len(),
            });
        }
        if rank(row, y) < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

fn rank(row: &[f64], y: usize) -> usize {
    row.iter()
        .enumerate()
        .filter(|&(c, &z)| z > row[y] || (z == row[y] && c < y))
        .count()
}

fn argmax(row: &[f64]) -> usize {
    (0..row.len()).find(|&c| rank(row, c) == 0).unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub top1: f64,
    pub top5: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub per_class: Vec<f64>,
    pub count: usize,
}

impl EvalReport {
    /// Top-5 becomes top-C when there are fewer than five classes.
    pub fn from_logits(logits: &[Vec<f64>], labels: &[usize], class_names: &[String]) -> Result<Self> {
        let c = class_names.len();
        let top1 = topk_accuracy(logits, labels, 1)?;
        let top5 = topk_accuracy(logits, labels, 5.min(c))?;
        let mut confusion = vec![vec![0usize; c]; c];
        for (row, &y) in logits.iter().zip(labels) {
            confusion[y][argmax(row)] += 1;
        }
        let per_class = confusion
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let n: usize = r.iter().sum();
                if n == 0 {
                    0.0
                } else {
                    r[i] as f64 / n as f64
                }
            })
            .collect();
        Ok(Self {
            class_names: class_names.to_vec(),
            top1,
            top5,
            confusion,
            per_class,
            count: labels.len(),
        })
    }

    pub fn trace_accuracy(&self) -> f64 {
        let trace: usize = (0..self.confusion.len()).map(|i| self.confusion[i][i]).sum();
        trace as f64 / self.count.max(1) as f64
    }
}

/// Scores a classifier on labeled data.
pub fn evaluate_classifier<T: Scalar>(classifier: &Checkpoint<T>, data: &LabeledDataset) -> Result<EvalReport> {
    let seqs: Vec<&[TokenId]> = data.examples().iter().map(|(s, _)| s.ids()).collect();
    let labels: Vec<usize> = data.examples().iter().map(|(_, y)| *y).collect();
    let logits = classify_all(&classifier.model, &seqs, 64)?;
    EvalReport::from_logits(&logits, &labels, data.class_names())
}

/// Closes a sampled sequence so the classifier can read it: samples cut by
/// the length limit get EOS in their last slot.
fn closed(tokens: &[TokenId], eos: TokenId, max_len: usize) -> Vec<TokenId> {
    let mut ids = tokens.to_vec();
    if let Some(p) = ids.iter().position(|&t| t == eos) {
        ids.truncate(p + 1);
        return ids;
    }
    ids.truncate(max_len - 1);
    ids.push(eos);
    ids
}

/// Generates `per_class` sketches from each class's generator and scores
/// them with `classifier`, the generating class being the label.
pub fn recognizability<G: Scalar, C: Scalar>(
    generators: &[(String, &Model<G>)],
    classifier: &Checkpoint<C>,
    per_class: usize,
    sampler: &SamplerConfig,
) -> Result<EvalReport> {
    let mut seqs = Vec::new();
    let mut labels = Vec::new();
    let eos = classifier.vocabulary().eos();
    let max_len = classifier.model.config().max_seq_len;
    for (i, (class, model)) in generators.iter().enumerate() {
        let label = classifier
            .class_names
            .iter()
            .position(|c| c == class)
            .ok_or_else(|| Error::Data(format!("generator class `{class}` unknown to the classifier")))?;
        if model.vocabulary() != classifier.vocabulary() {
            return Err(Error::Data(format!("generator `{class}` uses another vocabulary")));
        }
        let cfg = SamplerConfig {
            num_samples: per_class,
            seed: sampler.seed.wrapping_add(i as u64),
            ..sampler.clone()
        };
        for s in generate(*model, &cfg)?.samples {
            seqs.push(closed(&s.tokens, eos, max_len));
            labels.push(label);
        }
    }
    let views: Vec<&[TokenId]> = seqs.iter().map(|s| s.as_slice()).collect();
    let logits = classify_all(&classifier.model, &views, 64)?;
    EvalReport::from_logits(&logits, &labels, &classifier.class_names)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    ClassCount,
    TrainSize,
    NetworkSize,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class-count" | "class_count" => Ok(Self::ClassCount),
            "train-size" | "train_size" => Ok(Self::TrainSize),
            "network-size" | "network_size" => Ok(Self::NetworkSize),
            other => Err(Error::Config(format!(
                "unknown ablation axis `{other}` (expected class-count, train-size or network-size)"
            ))),
        }
    }
}

/// One grid value: a count for the class and size axes, or `L-A-H`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridPoint {
    Count(usize),
    Network { layers: usize, heads: usize, hidden: usize },
}

impl GridPoint {
    pub fn parse(axis: AblationAxis, text: &str) -> Result<Self> {
        let bad = || Error::Config(format!("invalid grid value `{text}` for {axis:?}"));
        match axis {
            AblationAxis::NetworkSize => {
                let parts: Vec<usize> = text
                    .split('-')
                    .map(|p| p.trim().parse().map_err(|_| bad()))
                    .collect::<Result<_>>()?;
                match parts.as_slice() {
                    [l, a, h] => Ok(Self::Network {
                        layers: *l,
                        heads: *a,
                        hidden: *h,
                    }),
                    _ => Err(bad()),
                }
            }
            _ => text.trim().parse().map(Self::Count).map_err(|_| bad()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::Count(n) => n.to_string(),
            Self::Network { layers, heads, hidden } => format!("{layers}-{heads}-{hidden}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub point: String,
    pub report: Option<EvalReport>,
    pub skipped: Option<String>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let header = ["point", "top1", "top5", "samples", "wall_ms"];
        let rows: Vec<[String; 5]> = self
            .rows
            .iter()
            .map(|r| match (&r.report, &r.skipped) {
                (Some(rep), _) => [
                    r.point.clone(),
                    format!("{:.2}", rep.top1 * 100.0),
                    format!("{:.2}", rep.top5 * 100.0),
                    rep.count.to_string(),
                    r.wall_ms.to_string(),
                ],
                (None, reason) => [
                    r.point.clone(),
                    "-".into(),
                    "-".into(),
                    format!("skipped: {}", reason.as_deref().unwrap_or("")),
                    r.wall_ms.to_string(),
                ],
            })
            .collect();
        let widths: Vec<usize> = (0..5)
            .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap())
            .collect();
        let mut line = |cells: [&str; 5]| {
            let text: Vec<String> = cells
                .iter()
                .enumerate()
                .map(|(c, s)| format!("{s:>w$}", w = widths[c]))
                .collect();
            writeln!(out, "{}", text.join("  ").trim_end()).unwrap();
        };
        line(header);
        for r in &rows {
            line([&r[0], &r[1], &r[2], &r[3], &r[4]]);
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("axis,point,top1,top5,samples,wall_ms,skipped\n");
        let axis = match self.axis {
            AblationAxis::ClassCount => "class_count",
            AblationAxis::TrainSize => "train_size",
            AblationAxis::NetworkSize => "network_size",
        };
        for r in &self.rows {
            let (t1, t5, n) = r
                .report
                .as_ref()
                .map_or((String::new(), String::new(), String::new()), |rep| {
                    (rep.top1.to_string(), rep.top5.to_string(), rep.count.to_string())
                });
            let skipped = r.skipped.as_deref().unwrap_or("").replace(',', ";");
            writeln!(out, "{axis},{},{t1},{t5},{n},{},{skipped}", r.point, r.wall_ms).unwrap();
        }
        out
    }
}

/// Everything held fixed across an ablation.
#[derive(Debug, Clone)]
pub struct AblationBase {
    pub model: ModelConfig,
    pub abstraction: AbstractionConfig,
    pub plan: TrainPlan,
    /// Number of classes for the train-size and network-size axes.
    pub classes: usize,
    /// Samples per class for the class-count and network-size axes.
    pub per_class: usize,
}

/// Runs classification fine-tuning for every grid point, scoring on `test`.
/// Classes are taken in corpus order; infeasible points are skipped.
pub fn ablation_runner(
    axis: AblationAxis,
    grid: &[GridPoint],
    train: &SketchCorpus,
    test: &SketchCorpus,
    base: &AblationBase,
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(grid.len());
    for point in grid {
        let started = Instant::now();
        let outcome = run_point(axis, point, train, test, base);
        let wall_ms = started.elapsed().as_millis() as u64;
        rows.push(match outcome {
            Ok(Ok(report)) => AblationRow {
                point: point.label(),
                report: Some(report),
                skipped: None,
                wall_ms,
            },
            Ok(Err(reason)) => AblationRow {
                point: point.label(),
                report: None,
                skipped: Some(reason),
                wall_ms,
            },
            Err(e) => return Err(e),
        });
    }
    Ok(AblationTable { axis, rows })
}

fn run_point(
    axis: AblationAxis,
    point: &GridPoint,
    train: &SketchCorpus,
    test: &SketchCorpus,
    base: &AblationBase,
) -> Result<std::result::Result<EvalReport, String>> {
    let mut model = base.model.clone();
    let (classes, per_class) = match (axis, point) {
        (AblationAxis::ClassCount, GridPoint::Count(n)) => (*n, base.per_class),
        (AblationAxis::TrainSize, GridPoint::Count(n)) => (base.classes, *n),
        (AblationAxis::NetworkSize, GridPoint::Network { layers, heads, hidden }) => {
            model.layers = *layers;
            model.heads = *heads;
            model.hidden = *hidden;
            (base.classes, base.per_class)
        }
        _ => return Ok(Err(format!("grid value {} does not fit axis {axis:?}", point.label()))),
    };
    if let Err(e) = model.validate() {
        return Ok(Err(e.to_string()));
    }
    if classes == 0 || classes > train.class_names().len() {
        return Ok(Err(format!(
            "{classes} classes requested, corpus has {}",
            train.class_names().len()
        )));
    }
    let names = train.class_names()[..classes].to_vec();
    let subset = train.restrict_classes(&names)?;
    let available = subset.per_class_counts().into_iter().min().unwrap_or(0);
    if available < per_class || per_class == 0 {
        return Ok(Err(format!(
            "{per_class} samples per class requested, corpus has {available}"
        )));
    }
    let subset = subset.take_per_class(per_class);
    let held = match test.restrict_classes(&names) {
        Ok(t) => t,
        Err(e) => return Ok(Err(e.to_string())),
    };
    let (data, _) = LabeledDataset::from_corpus(&subset, &base.abstraction, model.max_seq_len)?;
    let (test_data, _) = LabeledDataset::from_corpus(&held, &base.abstraction, model.max_seq_len)?;
    let ckpt = Checkpoint::new(Model::<f32>::new(model, base.plan.seed)?, base.abstraction)?;
    let run = finetune_classify(ckpt, &data, None, &base.plan)?;
    Ok(Ok(evaluate_classifier(&run.checkpoint, &test_data)?))
}
