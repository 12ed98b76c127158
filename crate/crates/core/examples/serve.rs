//! Serves `/v1` with an in-memory generator and classifier.
//!
//! `cargo run --example serve -- [bind]`, then for example
//! `curl -s localhost:8080/v1/generate -d '{"class":"square","seed":1}'`.

use std::collections::BTreeMap;
use std::sync::Arc;

use primsketch::model::{Model, ModelConfig};
use primsketch::primitives::AbstractionConfig;
use primsketch::service::{serve, ServiceConfig, ServiceState};
use primsketch::tokenizer::Vocabulary;
use primsketch::training::Checkpoint;

fn checkpoint(classes: Option<usize>, names: &[&str]) -> primsketch::Result<Checkpoint<f32>> {
    let abstraction = AbstractionConfig::default();
    let vocab = Vocabulary::new(abstraction.orientations);
    let config = ModelConfig {
        layers: 1,
        heads: 2,
        hidden: 32,
        max_seq_len: 256,
        num_classes: classes,
        ..ModelConfig::desk(&vocab)
    };
    let mut ckpt = Checkpoint::new(Model::new(config, 0)?, abstraction)?;
    ckpt.class_names = names.iter().map(|s| s.to_string()).collect();
    Ok(ckpt)
}

#[tokio::main]
async fn main() -> primsketch::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let config = ServiceConfig {
        bind: std::env::args().nth(1).unwrap_or_else(|| "127.0.0.1:8080".into()),
        cors_origins: vec!["http://localhost:5173".into()],
        ..ServiceConfig::default()
    };
    let generators = BTreeMap::from([("square".to_string(), checkpoint(None, &["square"])?)]);
    let classifier = checkpoint(Some(3), &["square", "triangle", "circle"])?;
    let state = ServiceState::from_checkpoints(config, generators, Some(classifier));
    serve(Arc::new(state)).await
}
