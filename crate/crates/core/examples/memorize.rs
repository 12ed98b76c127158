//! Overfits the desk-size model on ten sketches, then samples at low
//! temperature and counts exact reproductions.
//!
//! `cargo run --release --example memorize -- [steps]`

use std::time::Instant;

use primsketch::model::{Model, ModelConfig};
use primsketch::primitives::AbstractionConfig;
use primsketch::sampling::{generate, SamplerConfig};
use primsketch::stroke_data::{synthetic_corpus, ShapeKind};
use primsketch::tokenizer::{TokenId, Vocabulary};
use primsketch::training::{pretrain_sequences, tokenize_corpus, Checkpoint, TrainPlan};

fn main() -> primsketch::Result<()> {
    env_logger::init();
    let steps: usize = std::env::args()
        .nth(1)
        .map_or(500, |s| s.parse().expect("steps must be an integer"));
    let abstraction = AbstractionConfig::default();
    let vocab = Vocabulary::new(abstraction.orientations);
    let corpus = synthetic_corpus(&ShapeKind::ALL, 3, 0.03, 12)?;
    let (seqs, _, _) = tokenize_corpus(&corpus, &abstraction, 512)?;
    let seqs = seqs[..10].to_vec();
    println!(
        "training on {} sequences of {:?} tokens",
        seqs.len(),
        seqs.iter().map(|s| s.len()).collect::<Vec<_>>()
    );

    let plan = TrainPlan {
        epochs: steps,
        batch_size: seqs.len(),
        patience: steps,
        validation_fraction: 0.0,
        max_steps: Some(steps),
        seed: 3,
        ..TrainPlan::default()
    };
    let ckpt = Checkpoint::new(Model::<f32>::new(ModelConfig::desk(&vocab), plan.seed)?, abstraction)?;
    let started = Instant::now();
    let run = pretrain_sequences(ckpt, &seqs, &[], &plan)?;
    for (i, loss) in run
        .step_losses
        .iter()
        .enumerate()
        .filter(|(i, _)| i % 50 == 0 || i + 1 == steps)
    {
        println!("step {i:>4}  loss {loss:.4}");
    }
    println!("trained in {:.1}s", started.elapsed().as_secs_f64());

    let sampler = SamplerConfig {
        temperature: 0.1,
        num_samples: 100,
        seed: 99,
        ..SamplerConfig::default()
    };
    let drawn = generate(&run.checkpoint.model, &sampler)?;
    let training: Vec<&[TokenId]> = seqs.iter().map(|s| s.ids()).collect();
    let hits = drawn
        .samples
        .iter()
        .filter(|s| training.contains(&s.tokens.as_slice()))
        .count();
    println!("{hits}/100 samples at t=0.1 reproduce a training sketch");
    Ok(())
}
