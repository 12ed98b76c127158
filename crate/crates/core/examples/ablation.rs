//! Classification accuracy across a grid, on synthetic shapes.
//!
//! `cargo run --release --example ablation -- [class-count|train-size|network-size] [grid]`

use primsketch::evaluation::{ablation_runner, AblationAxis, AblationBase, GridPoint};
use primsketch::model::ModelConfig;
use primsketch::primitives::AbstractionConfig;
use primsketch::stroke_data::{synthetic_corpus, ShapeKind, Split};
use primsketch::tokenizer::Vocabulary;
use primsketch::training::TrainPlan;

fn main() -> primsketch::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let axis: AblationAxis = args.next().as_deref().unwrap_or("train-size").parse()?;
    let grid_text = args.next().unwrap_or_else(|| match axis {
        AblationAxis::ClassCount => "2,3,4".into(),
        AblationAxis::TrainSize => "5,20,60".into(),
        AblationAxis::NetworkSize => "1-2-16,2-2-32".into(),
    });
    let grid = grid_text
        .split(',')
        .map(|g| GridPoint::parse(axis, g))
        .collect::<primsketch::Result<Vec<_>>>()?;

    let abstraction = AbstractionConfig::default();
    let vocab = Vocabulary::new(abstraction.orientations);
    let train = synthetic_corpus(&ShapeKind::ALL, 60, 0.05, 1)?;
    let test = synthetic_corpus(&ShapeKind::ALL, 25, 0.05, 2)?.with_split(Split::Test);
    let base = AblationBase {
        model: ModelConfig {
            layers: 1,
            heads: 2,
            hidden: 32,
            max_seq_len: 128,
            ..ModelConfig::desk(&vocab)
        },
        abstraction,
        plan: TrainPlan {
            epochs: 6,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 3,
            ..TrainPlan::default()
        },
        classes: 4,
        per_class: 40,
    };
    let table = ablation_runner(axis, &grid, &train, &test, &base)?;
    print!("{}", table.to_text());
    Ok(())
}
