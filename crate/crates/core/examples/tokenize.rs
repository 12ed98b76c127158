//! Token view of sketches: encoding, decoding, padding and the errors raised
//! for malformed sequences.

use primsketch::primitives::AbstractionConfig;
use primsketch::stroke_data::{synthetic_corpus, ShapeKind};
use primsketch::tokenizer::{decode, encode, pad_or_truncate, TokenId, Vocabulary};
use primsketch::training::tokenize_corpus;

fn show(ids: &[TokenId], vocab: &Vocabulary) -> String {
    ids.iter()
        .map(|&t| match t {
            t if t == vocab.bos() => "BOS".to_string(),
            t if t == vocab.sep() => "SEP".to_string(),
            t if t == vocab.eos() => "EOS".to_string(),
            t if t == vocab.pad() => "PAD".to_string(),
            t => t.to_string(),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn main() -> primsketch::Result<()> {
    let abstraction = AbstractionConfig::default();
    let vocab = Vocabulary::new(abstraction.orientations);
    println!(
        "vocabulary: {} tokens, BOS={} SEP={} EOS={} PAD={}",
        vocab.size(),
        vocab.bos(),
        vocab.sep(),
        vocab.eos(),
        vocab.pad()
    );

    let corpus = synthetic_corpus(&ShapeKind::ALL, 1, 0.02, 4)?;
    let (seqs, _, report) = tokenize_corpus(&corpus, &abstraction, 512)?;
    for (sketch, seq) in corpus.sketches().iter().zip(&seqs) {
        println!("\n{} ({} tokens)", sketch.label().unwrap_or("?"), seq.len());
        println!("  {}", show(seq.ids(), &vocab));
        let abs = decode(seq.ids(), &vocab)?;
        assert_eq!(encode(&abs, &vocab)?.ids(), seq.ids());
    }
    println!("\nlengths: {:?}", report.lengths);

    let (padded, cut) = pad_or_truncate(&seqs[0], 12, &vocab);
    println!(
        "\nfirst sequence cut to 12: {} (truncated: {cut})",
        show(padded.ids(), &vocab)
    );

    let bad: [&[TokenId]; 3] = [
        &[vocab.bos(), 1, vocab.sep(), vocab.eos()],
        &[vocab.bos(), 1, vocab.sep(), vocab.sep(), 2, vocab.eos()],
        &[vocab.bos(), 1, 2],
    ];
    for ids in bad {
        println!("{:<28} -> {}", show(ids, &vocab), decode(ids, &vocab).unwrap_err());
    }
    Ok(())
}
