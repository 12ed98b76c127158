//! Fine-tunes a classifier twice, once from random weights and once from a
//! next-token model pre-trained on other classes, and compares how fast the
//! validation loss falls.
//!
//! Synthetic shapes stand in for real sketches: pre-training sees squares
//! and zigzags, the classifier separates triangles from circles.

use primsketch::model::{Model, ModelConfig};
use primsketch::primitives::AbstractionConfig;
use primsketch::stroke_data::{synthetic_corpus, ShapeKind, Split};
use primsketch::tokenizer::Vocabulary;
use primsketch::training::{finetune_classify, pretrain, Checkpoint, LabeledDataset, TrainPlan, TrainingRun};

fn curve(run: &TrainingRun<f32>) -> Vec<f64> {
    run.split_history(Split::Validation).iter().map(|m| m.loss).collect()
}

fn main() -> primsketch::Result<()> {
    env_logger::init();
    let abstraction = AbstractionConfig::default();
    let vocab = Vocabulary::new(abstraction.orientations);
    let config = ModelConfig {
        layers: 2,
        heads: 2,
        hidden: 48,
        max_seq_len: 128,
        ..ModelConfig::desk(&vocab)
    };
    let pre_corpus = synthetic_corpus(&[ShapeKind::Square, ShapeKind::Zigzag], 80, 0.04, 1)?;
    let pre_plan = TrainPlan {
        epochs: 6,
        batch_size: 16,
        learning_rate: 1e-3,
        seed: 2,
        ..TrainPlan::default()
    };
    let (pre, _) = pretrain::<f32>(&pre_corpus, config.clone(), abstraction, &pre_plan)?;

    let shapes = [ShapeKind::Triangle, ShapeKind::Circle];
    let (train, _) = LabeledDataset::from_corpus(&synthetic_corpus(&shapes, 30, 0.08, 3)?, &abstraction, 128)?;
    let (valid, _) = LabeledDataset::from_corpus(&synthetic_corpus(&shapes, 30, 0.08, 4)?, &abstraction, 128)?;
    let plan = TrainPlan {
        epochs: 8,
        batch_size: 16,
        learning_rate: 1e-3,
        patience: 8,
        seed: 5,
        ..TrainPlan::default()
    };
    let scratch = finetune_classify(
        Checkpoint::new(Model::<f32>::new(config, plan.seed)?, abstraction)?,
        &train,
        Some(&valid),
        &plan,
    )?;
    let warm = finetune_classify(pre.checkpoint, &train, Some(&valid), &plan)?;
    println!("{:>5} {:>10} {:>10}", "epoch", "scratch", "pretrained");
    for (i, (a, b)) in curve(&scratch).iter().zip(curve(&warm)).enumerate() {
        println!("{:>5} {a:>10.4} {b:>10.4}", i + 1);
    }
    Ok(())
}
