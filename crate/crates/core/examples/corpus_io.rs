//! Parses QuickDraw ndjson (or builds a synthetic corpus), writes the
//! binary corpus file and reads it back.
//!
//! `cargo run --example corpus_io -- [file.ndjson ...]`

use std::path::PathBuf;

use primsketch::stroke_data::{
    load_corpus, parse_quickdraw_file, save_corpus, sidecar_path, synthetic_corpus, ShapeKind, SketchCorpus, Split,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let inputs: Vec<PathBuf> = std::env::args().skip(1).map(PathBuf::from).collect();
    let corpus = if inputs.is_empty() {
        synthetic_corpus(&ShapeKind::ALL, 25, 0.02, 1)?
    } else {
        let mut parts = Vec::new();
        for path in &inputs {
            let outcome = parse_quickdraw_file(path, Split::Train)?;
            println!(
                "{}: {} sketches, {} bad records, {} empty",
                path.display(),
                outcome.corpus.len(),
                outcome.errors.len(),
                outcome.skipped_empty.len()
            );
            parts.push(outcome.corpus);
        }
        SketchCorpus::merge(parts, Split::Train)?
    };
    let dir = tempfile_dir()?;
    let path = dir.join("corpus.pskc");
    save_corpus(&corpus, &path)?;
    let back = load_corpus(&path)?;
    assert_eq!(back.sketches(), corpus.sketches());
    println!(
        "{} sketches in {} ({} bytes), classes in {}",
        back.len(),
        path.display(),
        std::fs::metadata(&path)?.len(),
        sidecar_path(&path).display()
    );
    for (name, n) in back.class_names().iter().zip(back.per_class_counts()) {
        println!("  {name}: {n}");
    }
    Ok(())
}

fn tempfile_dir() -> std::io::Result<PathBuf> {
    let dir = std::env::temp_dir().join("primsketch-corpus");
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}
