//! Renders token sequences, including a malformed one that needs repair.
//!
//! `cargo run --example render_svg -- [out_dir]`; with `--features raster`
//! PNG files are written too.

use std::path::PathBuf;

use primsketch::primitives::AbstractionConfig;
use primsketch::render::{to_svg, tokens_to_polylines};
use primsketch::stroke_data::{synthesize, ShapeKind};
use primsketch::tokenizer::{tokenize_sketch, TokenId, Vocabulary};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("primsketch-render"), PathBuf::from);
    std::fs::create_dir_all(&out)?;
    let abstraction = AbstractionConfig::default();
    let dict = abstraction.dictionary()?;
    let vocab = Vocabulary::for_dictionary(&dict);

    let mut drawings: Vec<(String, Vec<TokenId>)> = Vec::new();
    for shape in ShapeKind::ALL {
        let tokens = tokenize_sketch(&synthesize(shape, 0.02, 7)?, &dict, &vocab)?;
        drawings.push((shape.to_string(), tokens.into_ids()));
    }
    // a generation cut off mid-stroke, with a dangling SEP
    drawings.push(("truncated".into(), vec![0, 0, 0, 9, 9, 9, 18, 18, vocab.sep()]));

    for (name, tokens) in drawings {
        let drawing = tokens_to_polylines(&tokens, &dict, &vocab, true)?;
        let svg = out.join(format!("{name}.svg"));
        std::fs::write(&svg, to_svg(&drawing.polylines, 2.0, 128))?;
        println!("{}: {} polylines", svg.display(), drawing.polylines.len());
        for r in &drawing.repairs {
            println!("  repaired at {}: {:?} ({})", r.position, r.action, r.kind);
        }
        #[cfg(feature = "raster")]
        {
            let png = out.join(format!("{name}.png"));
            std::fs::write(&png, primsketch::render::to_png(&drawing.polylines, 2.0, 128)?)?;
        }
    }
    Ok(())
}
