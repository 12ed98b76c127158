//! Fine-tunes a classifier on three synthetic shape classes and reports
//! accuracy and the confusion matrix on fresh samples.
//!
//! `cargo run --release --example classify -- [per_class] [epochs]`

use primsketch::evaluation::evaluate_classifier;
use primsketch::model::{Model, ModelConfig};
use primsketch::primitives::AbstractionConfig;
use primsketch::stroke_data::{synthetic_corpus, ShapeKind, Split};
use primsketch::tokenizer::Vocabulary;
use primsketch::training::{finetune_classify, Checkpoint, LabeledDataset, TrainPlan};

fn main() -> primsketch::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let per_class: usize = args
        .next()
        .map_or(60, |s| s.parse().expect("per_class must be an integer"));
    let epochs: usize = args.next().map_or(8, |s| s.parse().expect("epochs must be an integer"));
    let abstraction = AbstractionConfig::default();
    let vocab = Vocabulary::new(abstraction.orientations);
    let shapes = [ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Circle];
    let config = ModelConfig {
        layers: 2,
        heads: 2,
        hidden: 64,
        max_seq_len: 128,
        ..ModelConfig::desk(&vocab)
    };
    let (train, _) = LabeledDataset::from_corpus(&synthetic_corpus(&shapes, per_class, 0.02, 1)?, &abstraction, 128)?;
    let (test, _) = LabeledDataset::from_corpus(&synthetic_corpus(&shapes, 30, 0.02, 2)?, &abstraction, 128)?;
    let plan = TrainPlan {
        epochs,
        batch_size: 16,
        learning_rate: 1e-3,
        seed: 4,
        ..TrainPlan::default()
    };
    let ckpt = Checkpoint::new(Model::<f32>::new(config, plan.seed)?, abstraction)?;
    let run = finetune_classify(ckpt, &train, None, &plan)?;
    for m in run.split_history(Split::Validation) {
        println!(
            "epoch {:>2}  loss {:.4}  top-1 {:.3}",
            m.epoch,
            m.loss,
            m.top1.unwrap_or(0.0)
        );
    }
    let report = evaluate_classifier(&run.checkpoint, &test)?;
    println!("\ntest top-1 {:.3} over {} sketches", report.top1, report.count);
    for (name, row) in report.class_names.iter().zip(&report.confusion) {
        println!("{name:>10} {row:?}");
    }
    Ok(())
}
