//! Sampling entropy and sketch length as temperature rises.

use primsketch::model::{Model, ModelConfig};
use primsketch::sampling::{generate, SamplerConfig};
use primsketch::tokenizer::Vocabulary;

fn main() -> primsketch::Result<()> {
    let vocab = Vocabulary::new(36);
    let config = ModelConfig {
        layers: 2,
        heads: 2,
        hidden: 32,
        max_seq_len: 96,
        dropout: 0.0,
        ..ModelConfig::desk(&vocab)
    };
    let model = Model::<f32>::new(config, 1)?;
    println!(
        "{:>5} {:>13} {:>11} {:>9}",
        "t", "mean entropy", "mean length", "eos rate"
    );
    for t in [0.2, 0.6, 1.0, 1.4, 2.0] {
        let sampler = SamplerConfig {
            temperature: t,
            num_samples: 16,
            seed: 3,
            ..SamplerConfig::default()
        };
        let drawn = generate(&model, &sampler)?;
        let steps: Vec<f64> = drawn.samples.iter().flat_map(|s| s.entropy.iter().copied()).collect();
        let mean_h = steps.iter().sum::<f64>() / steps.len() as f64;
        let mean_len = drawn.samples.iter().map(|s| s.tokens.len()).sum::<usize>() as f64 / 16.0;
        let eos = drawn
            .samples
            .iter()
            .filter(|s| s.tokens.last() == Some(&vocab.eos()))
            .count();
        println!(
            "{t:>5.1} {mean_h:>13.3} {mean_len:>11.1} {:>8.0}%",
            100.0 * eos as f64 / 16.0
        );
    }
    Ok(())
}
