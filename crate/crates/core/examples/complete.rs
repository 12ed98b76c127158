//! Completes the first half of a square with a checkpoint written by the
//! `generate` example, or with an untrained model when none is given.
//!
//! `cargo run --release --example complete -- [checkpoint]`

use primsketch::model::{Model, ModelConfig};
use primsketch::primitives::AbstractionConfig;
use primsketch::sampling::SamplerConfig;
use primsketch::service::complete_sketch;
use primsketch::stroke_data::Stroke3Point;
use primsketch::tokenizer::Vocabulary;
use primsketch::training::{load_checkpoint, Checkpoint};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ckpt: Checkpoint<f32> = match std::env::args().nth(1) {
        Some(path) => load_checkpoint(path.as_ref())?,
        None => {
            let abstraction = AbstractionConfig::default();
            let vocab = Vocabulary::new(abstraction.orientations);
            let config = ModelConfig {
                layers: 1,
                heads: 2,
                hidden: 32,
                max_seq_len: 128,
                ..ModelConfig::desk(&vocab)
            };
            Checkpoint::new(Model::new(config, 0)?, abstraction)?
        }
    };
    // two sides of a square, in screen units
    let prefix = [
        Stroke3Point::new(10.0, 10.0, false),
        Stroke3Point::new(100.0, 0.0, false),
        Stroke3Point::new(0.0, 100.0, true),
    ];
    let sampler = SamplerConfig {
        temperature: 0.7,
        num_samples: 3,
        seed: 8,
        max_new_tokens: 100,
        ..SamplerConfig::default()
    };
    let out = complete_sketch(&ckpt, &prefix, &sampler, 256, 2.0)?;
    println!("prefix: {} tokens", out.prefix_token_count);
    for (i, c) in out.completions.iter().enumerate() {
        println!("completion {i}: {} points, stop {:?}", c.strokes.len(), c.stop_reason);
        for p in c.strokes.iter().take(6) {
            println!("  [{:8.2}, {:8.2}, {}]", p[0], p[1], p[2]);
        }
    }
    Ok(())
}
