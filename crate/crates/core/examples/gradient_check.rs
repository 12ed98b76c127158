//! Central-difference check of every parameter gradient of a small model
//! against the tape's reverse pass.

use primsketch::model::{Model, ModelConfig};
use primsketch::numerics::{check_parameters, ParamId};
use primsketch::tokenizer::{TokenId, Vocabulary};
use primsketch::training::lm_batch_loss;

fn main() -> primsketch::Result<()> {
    let vocab = Vocabulary::new(36);
    let config = ModelConfig {
        layers: 2,
        heads: 2,
        hidden: 16,
        max_seq_len: 12,
        dropout: 0.0,
        ..ModelConfig::desk(&vocab)
    };
    let model = Model::<f64>::new(config.clone(), 0)?;
    let seq: Vec<TokenId> = vec![vocab.bos(), 4, 4, 9, vocab.sep(), 20, 21, 21, 33, 0, 1, vocab.eos()];
    let mut store = model.params().clone();
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    let report = check_parameters(&mut store, &ids, 1e-5, |params, tape| {
        let m = Model::from_params(config.clone(), params.clone())?;
        lm_batch_loss(&m, tape, &[&seq], None)
    })?;
    println!(
        "checked {} parameters, max relative error {:.3e}",
        report.checked, report.max_relative_error
    );
    if let Some((name, index)) = &report.worst {
        println!("worst entry: {name}[{index}]");
    }
    println!("{}", if report.passes(1e-4) { "ok" } else { "gradient mismatch" });
    Ok(())
}
