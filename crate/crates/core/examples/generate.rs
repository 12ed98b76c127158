//! Trains a small generator on one synthetic class, saves it and samples
//! sketches from scratch into SVG files.
//!
//! `cargo run --release --example generate -- [shape] [out_dir]`

use std::path::PathBuf;

use primsketch::model::{Model, ModelConfig};
use primsketch::primitives::AbstractionConfig;
use primsketch::render::{to_svg, tokens_to_polylines};
use primsketch::sampling::{generate, SamplerConfig};
use primsketch::stroke_data::{synthetic_corpus, ShapeKind};
use primsketch::tokenizer::Vocabulary;
use primsketch::training::{pretrain_sequences, save_checkpoint, tokenize_corpus, Checkpoint, TrainPlan};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let shape: ShapeKind = args.next().as_deref().unwrap_or("square").parse()?;
    let out = args
        .next()
        .map_or_else(|| std::env::temp_dir().join("primsketch-generate"), PathBuf::from);
    std::fs::create_dir_all(&out)?;

    let abstraction = AbstractionConfig::default();
    let vocab = Vocabulary::new(abstraction.orientations);
    let corpus = synthetic_corpus(&[shape], 64, 0.03, 1)?;
    let (seqs, _, _) = tokenize_corpus(&corpus, &abstraction, 128)?;
    let config = ModelConfig {
        layers: 2,
        heads: 2,
        hidden: 64,
        max_seq_len: 128,
        ..ModelConfig::desk(&vocab)
    };
    let plan = TrainPlan {
        epochs: 30,
        batch_size: 16,
        learning_rate: 3e-3,
        validation_fraction: 0.0,
        patience: 30,
        seed: 5,
        ..TrainPlan::default()
    };
    let mut ckpt = Checkpoint::new(Model::<f32>::new(config, plan.seed)?, abstraction)?;
    ckpt.class_names = vec![shape.to_string()];
    let run = pretrain_sequences(ckpt, &seqs, &[], &plan)?;
    println!(
        "final training loss {:.4}",
        run.step_losses.last().copied().unwrap_or(f64::NAN)
    );
    let path = out.join(format!("{shape}.ckpt"));
    save_checkpoint(&run.checkpoint, &path)?;
    println!("saved {}", path.display());

    let sampler = SamplerConfig {
        temperature: 0.8,
        num_samples: 4,
        seed: 21,
        ..SamplerConfig::default()
    };
    let dict = abstraction.dictionary()?;
    for (i, sample) in generate(&run.checkpoint.model, &sampler)?.samples.iter().enumerate() {
        let drawing = tokens_to_polylines(&sample.tokens, &dict, &vocab, true)?;
        let file = out.join(format!("sample_{i}.svg"));
        std::fs::write(&file, to_svg(&drawing.polylines, 2.0, 256))?;
        println!(
            "{}: {} tokens, stop {:?}, {} repairs",
            file.display(),
            sample.tokens.len(),
            sample.stop_reason,
            drawing.repairs.len()
        );
    }
    Ok(())
}
