mod common;

use primsketch::primitives::{abstract_sketch, AbstractionConfig, PrimitiveDictionary};
use primsketch::render::{to_svg, tokens_to_polylines};
use primsketch::sampling::{complete, completion_prefix, generate, SamplerConfig};
use primsketch::stroke_data::{load_corpus, normalize, save_corpus, synthetic_corpus, ShapeKind, Sketch, Stroke3Point};
use primsketch::tokenizer::{decode, encode, tokenize_sketch, Vocabulary};
use primsketch::training::{load_checkpoint, save_checkpoint};
use proptest::prelude::*;

fn dictionary() -> PrimitiveDictionary {
    AbstractionConfig::default().dictionary().unwrap()
}

fn vocab() -> Vocabulary {
    Vocabulary::for_dictionary(&dictionary())
}

fn sketch_strategy() -> impl Strategy<Value = Sketch> {
    prop::collection::vec((-50.0..50.0f64, -50.0..50.0f64, prop::bool::weighted(0.2)), 3..40).prop_filter_map(
        "degenerate",
        |raw| {
            let mut points: Vec<Stroke3Point> = raw.into_iter().map(|(x, y, up)| Stroke3Point::new(x, y, up)).collect();
            points.last_mut()?.pen_up = true;
            let sketch = Sketch::new(points, None).ok()?;
            normalize(&sketch).ok()
        },
    )
}

proptest! {
    #[test]
    fn normalized_sketches_fill_the_unit_box(sketch in sketch_strategy()) {
        let (min, max) = sketch.bounds();
        prop_assert!(min[0].abs() < 1e-9 && min[1].abs() < 1e-9);
        let span = (max[0] - min[0]).max(max[1] - min[1]);
        prop_assert!((span - 1.0).abs() < 1e-9);
    }

    #[test]
    fn tokens_are_framed_and_decode_to_a_fixed_point(sketch in sketch_strategy()) {
        let (dict, vocab) = (dictionary(), vocab());
        let tokens = tokenize_sketch(&sketch, &dict, &vocab).unwrap();
        let ids = tokens.ids();
        prop_assert_eq!(ids[0], vocab.bos());
        prop_assert_eq!(*ids.last().unwrap(), vocab.eos());
        prop_assert!(ids.iter().all(|&t| (t as usize) < vocab.size() && t != vocab.pad()));
        let decoded = decode(ids, &vocab).unwrap();
        prop_assert!(decoded.is_token_canonical());
        prop_assert_eq!(encode(&decoded, &vocab).unwrap(), tokens);
    }

    #[test]
    fn every_token_sequence_renders_after_repair(ids in prop::collection::vec(0u16..40, 0..60)) {
        let (dict, vocab) = (dictionary(), vocab());
        let ids: Vec<_> = ids.into_iter().map(Into::into).collect();
        let rendering = tokens_to_polylines(&ids, &dict, &vocab, true).unwrap();
        let svg = to_svg(&rendering.polylines, 2.0, 64);
        prop_assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }
}

#[test]
fn corpus_files_round_trip() {
    let corpus = synthetic_corpus(&[ShapeKind::Square, ShapeKind::Zigzag], 5, 0.05, 9).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("corpus.pskc");
    save_corpus(&corpus, &path).unwrap();
    assert_eq!(load_corpus(&path).unwrap(), corpus);
}

#[test]
fn abstraction_of_a_square_uses_four_directions() {
    let side = 0.25;
    let points = vec![
        Stroke3Point::new(0.0, 0.0, false),
        Stroke3Point::new(side, 0.0, false),
        Stroke3Point::new(0.0, side, false),
        Stroke3Point::new(-side, 0.0, false),
        Stroke3Point::new(0.0, -side, true),
    ];
    let sketch = normalize(&Sketch::new(points, None).unwrap()).unwrap();
    let abs = abstract_sketch(&sketch, &dictionary()).unwrap();
    assert_eq!(abs.runs.len(), 4);
    assert!(abs.runs.iter().all(|r| r.count == 20));
}

#[test]
fn generation_is_seeded_and_independent_of_sample_count() {
    let model = common::toy_generator(4).model;
    let sampler = SamplerConfig {
        seed: 12,
        num_samples: 3,
        max_new_tokens: 30,
        ..SamplerConfig::default()
    };
    let three = generate(&model, &sampler).unwrap();
    let again = generate(&model, &sampler).unwrap();
    let one = generate(
        &model,
        &SamplerConfig {
            num_samples: 1,
            ..sampler.clone()
        },
    )
    .unwrap();
    assert_eq!(three.samples.len(), 3);
    for (a, b) in three.samples.iter().zip(&again.samples) {
        assert_eq!(a.tokens, b.tokens);
    }
    assert_eq!(one.samples[0].tokens, three.samples[0].tokens);
}

#[test]
fn completion_keeps_the_prefix() {
    let model = common::toy_generator(5).model;
    let (dict, vocab) = (dictionary(), vocab());
    let sketch = synthetic_corpus(&[ShapeKind::Triangle], 1, 0.0, 1).unwrap().sketches()[0].clone();
    let tokens = tokenize_sketch(&sketch, &dict, &vocab).unwrap();
    let prefix = completion_prefix(&tokens, &vocab);
    let sampler = SamplerConfig {
        seed: 3,
        num_samples: 2,
        max_new_tokens: 10,
        ..SamplerConfig::default()
    };
    let result = complete(&model, &prefix, &sampler).unwrap();
    assert_eq!(result.prefix_len, prefix.len());
    for sample in &result.samples {
        assert_eq!(&sample.tokens[..prefix.len()], prefix.as_slice());
    }
}

#[test]
fn checkpoint_files_preserve_generation() {
    let ckpt = common::toy_generator(6);
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("toy.ckpt");
    save_checkpoint(&ckpt, &path).unwrap();
    let loaded = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(loaded.class_names, ckpt.class_names);
    let sampler = SamplerConfig {
        seed: 8,
        num_samples: 2,
        max_new_tokens: 20,
        ..SamplerConfig::default()
    };
    let before = generate(&ckpt.model, &sampler).unwrap();
    let after = generate(&loaded.model, &sampler).unwrap();
    for (a, b) in before.samples.iter().zip(&after.samples) {
        assert_eq!(a.tokens, b.tokens);
    }
}
