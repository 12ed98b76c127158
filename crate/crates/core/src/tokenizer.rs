//! Token sequences over primitives plus BOS, SEP, EOS and PAD.
//!
//! A run becomes its primitive id repeated `count` times. SEP goes right
//! before every pen-up run. Decoding splits runs wherever the primitive id
//! changes or a SEP appears, so [`AbstractedSketch::is_token_canonical`]
//! sketches round-trip exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, TokenErrorKind};
use crate::primitives::{abstract_sketch, AbstractedSketch, PrimitiveDictionary, Run};
use crate::stroke_data::{normalize, Sketch};

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Vocabulary {
    orientations: usize,
}

impl Vocabulary {
    pub fn new(orientations: usize) -> Self {
        Self { orientations }
    }

    pub fn for_dictionary(dict: &PrimitiveDictionary) -> Self {
        Self::new(dict.orientation_count())
    }

    pub fn orientations(&self) -> usize {
        self.orientations
    }

    pub fn size(&self) -> usize {
        self.orientations + 4
    }

    pub fn bos(&self) -> TokenId {
        self.orientations as TokenId
    }

    pub fn sep(&self) -> TokenId {
        self.orientations as TokenId + 1
    }

    pub fn eos(&self) -> TokenId {
        self.orientations as TokenId + 2
    }

    pub fn pad(&self) -> TokenId {
        self.orientations as TokenId + 3
    }

    pub fn is_primitive(&self, id: TokenId) -> bool {
        (id as usize) < self.orientations
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<TokenId>", into = "Vec<TokenId>")]
pub struct TokenSequence {
    ids: Vec<TokenId>,
    attention_length: usize,
}

impl TokenSequence {
    /// Wraps raw ids; `attention_length` counts every id except `pad`.
    pub fn from_ids(ids: Vec<TokenId>, pad: TokenId) -> Self {
        let attention_length = ids.iter().filter(|&&t| t != pad).count();
        Self { ids, attention_length }
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn into_ids(self) -> Vec<TokenId> {
        self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn attention_length(&self) -> usize {
        self.attention_length
    }

    /// Position of the first EOS, if any.
    pub fn eos_position(&self, vocab: &Vocabulary) -> Option<usize> {
        self.ids.iter().position(|&t| t == vocab.eos())
    }
}

impl From<Vec<TokenId>> for TokenSequence {
    fn from(ids: Vec<TokenId>) -> Self {
        // without a vocabulary PAD cannot be told apart; counted as attended
        let attention_length = ids.len();
        Self { ids, attention_length }
    }
}

impl From<TokenSequence> for Vec<TokenId> {
    fn from(seq: TokenSequence) -> Self {
        seq.ids
    }
}

pub fn encode(abs: &AbstractedSketch, vocab: &Vocabulary) -> Result<TokenSequence> {
    let mut ids = Vec::with_capacity(2 + abs.total_repeats() as usize + abs.pen_up_runs());
    ids.push(vocab.bos());
    for (i, run) in abs.runs.iter().enumerate() {
        if run.primitive >= vocab.orientations() {
            return Err(Error::UnknownPrimitive {
                id: run.primitive,
                size: vocab.orientations(),
            });
        }
        if run.count < 1 {
            return Err(Error::Token {
                position: i,
                kind: TokenErrorKind::ZeroRepeat,
            });
        }
        if run.pen_up_move {
            ids.push(vocab.sep());
        }
        ids.extend(std::iter::repeat_n(run.primitive as TokenId, run.count as usize));
    }
    ids.push(vocab.eos());
    Ok(TokenSequence::from_ids(ids, vocab.pad()))
}

fn token_error(position: usize, kind: TokenErrorKind) -> Error {
    Error::Token { position, kind }
}

/// Inverse of [`encode`]. Everything after the first EOS is ignored.
pub fn decode(tokens: &[TokenId], vocab: &Vocabulary) -> Result<AbstractedSketch> {
    match tokens.first() {
        Some(&t) if t == vocab.bos() => {}
        _ => return Err(token_error(0, TokenErrorKind::MissingBos)),
    }
    let mut runs: Vec<Run> = Vec::new();
    let mut after_sep = false;
    for (pos, &t) in tokens.iter().enumerate().skip(1) {
        if t == vocab.eos() {
            if after_sep {
                return Err(token_error(pos - 1, TokenErrorKind::TerminalSep));
            }
            return Ok(AbstractedSketch::new(runs));
        } else if t == vocab.sep() {
            if after_sep {
                return Err(token_error(pos, TokenErrorKind::ConsecutiveSep));
            }
            after_sep = true;
        } else if vocab.is_primitive(t) {
            let id = t as usize;
            match runs.last_mut() {
                Some(run) if !after_sep && run.primitive == id => run.count += 1,
                _ => runs.push(Run::new(id, 1, after_sep)),
            }
            after_sep = false;
        } else if t == vocab.bos() {
            return Err(token_error(pos, TokenErrorKind::UnexpectedBos));
        } else if t == vocab.pad() {
            return Err(token_error(pos, TokenErrorKind::PadBeforeEos));
        } else {
            return Err(token_error(pos, TokenErrorKind::UnknownId(t)));
        }
    }
    Err(token_error(tokens.len(), TokenErrorKind::MissingEos))
}

/// Pads with PAD up to `max_len`, or cuts the content to `max_len - 1` tokens
/// and forces EOS. Returns whether anything was cut.
///
/// A SEP left dangling by the cut is dropped as well, so the result always
/// decodes.
pub fn pad_or_truncate(tokens: &TokenSequence, max_len: usize, vocab: &Vocabulary) -> (TokenSequence, bool) {
    assert!(max_len >= 3, "max_len must be at least 3");
    let content = tokens.attention_length();
    let mut ids: Vec<TokenId> = tokens.ids()[..content.min(tokens.len())].to_vec();
    let truncated = ids.len() > max_len;
    if truncated {
        ids.truncate(max_len - 1);
        if ids.last() == Some(&vocab.sep()) {
            ids.pop();
        }
        ids.push(vocab.eos());
    }
    let attended = ids.len();
    ids.resize(max_len, vocab.pad());
    (
        TokenSequence {
            ids,
            attention_length: attended,
        },
        truncated,
    )
}

/// Normalize, abstract and encode a raw sketch.
pub fn tokenize_sketch(sketch: &Sketch, dict: &PrimitiveDictionary, vocab: &Vocabulary) -> Result<TokenSequence> {
    let normalized = normalize(sketch)?;
    let abs = abstract_sketch(&normalized, dict)?;
    encode(&abs, vocab)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    const K: usize = 36;
    const BOS: u32 = 36;
    const SEP: u32 = 37;
    const EOS: u32 = 38;
    const PAD: u32 = 39;

    fn vocab() -> Vocabulary {
        Vocabulary::new(K)
    }

    #[test]
    fn special_ids_follow_primitives() {
        let v = vocab();
        assert_eq!((v.bos(), v.sep(), v.eos(), v.pad(), v.size()), (BOS, SEP, EOS, PAD, 40));
    }

    #[test]
    fn encode_example() {
        let abs = AbstractedSketch::new(vec![Run::new(0, 2, false), Run::new(9, 1, true)]);
        let seq = encode(&abs, &vocab()).unwrap();
        assert_eq!(seq.ids(), [BOS, 0, 0, SEP, 9, EOS]);
        assert_eq!(seq.attention_length(), 6);
        assert_eq!(serde_json::to_string(&seq).unwrap(), "[36,0,0,37,9,38]");
    }

    #[test]
    fn one_sep_per_pen_up_run() {
        let abs = AbstractedSketch::new(vec![Run::new(3, 2, false), Run::new(5, 1, true), Run::new(7, 4, false)]);
        let seq = encode(&abs, &vocab()).unwrap();
        assert_eq!(seq.ids().iter().filter(|&&t| t == SEP).count(), 1);
        assert_eq!(decode(seq.ids(), &vocab()).unwrap(), abs);
    }

    #[test]
    fn encode_rejects_zero_count() {
        let abs = AbstractedSketch::new(vec![Run::new(3, 0, false)]);
        assert!(matches!(
            encode(&abs, &vocab()),
            Err(Error::Token {
                kind: TokenErrorKind::ZeroRepeat,
                ..
            })
        ));
    }

    #[test]
    fn decode_errors_name_position() {
        let v = vocab();
        let cases: [(&[u32], usize, TokenErrorKind); 6] = [
            (&[BOS, 0, SEP, EOS], 2, TokenErrorKind::TerminalSep),
            (&[0, 0, EOS], 0, TokenErrorKind::MissingBos),
            (&[BOS, 0, 0], 3, TokenErrorKind::MissingEos),
            (&[BOS, SEP, SEP, 1, EOS], 2, TokenErrorKind::ConsecutiveSep),
            (&[BOS, 1, PAD, EOS], 2, TokenErrorKind::PadBeforeEos),
            (&[BOS, 1, 55, EOS], 2, TokenErrorKind::UnknownId(55)),
        ];
        for (tokens, position, kind) in cases {
            match decode(tokens, &v) {
                Err(Error::Token { position: p, kind: k }) => assert_eq!((p, k), (position, kind)),
                other => panic!("{tokens:?}: unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn decode_ignores_tail_after_eos() {
        let abs = decode(&[BOS, 4, EOS, PAD, PAD, 7], &vocab()).unwrap();
        assert_eq!(abs.runs, vec![Run::new(4, 1, false)]);
    }

    #[test]
    fn pad_and_truncate() {
        let v = vocab();
        let five = TokenSequence::from_ids(vec![BOS, 1, 1, 2, EOS], PAD);
        let (p, cut) = pad_or_truncate(&five, 8, &v);
        assert!(!cut);
        assert_eq!(p.ids(), [BOS, 1, 1, 2, EOS, PAD, PAD, PAD]);
        assert_eq!(p.attention_length(), 5);

        let eight = TokenSequence::from_ids(vec![BOS, 1, 1, 2, 2, 3, 3, EOS], PAD);
        assert_eq!(pad_or_truncate(&eight, 8, &v), (eight.clone(), false));

        let twelve = TokenSequence::from_ids(vec![BOS, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5, EOS], PAD);
        let (t, cut) = pad_or_truncate(&twelve, 8, &v);
        assert!(cut);
        assert_eq!(t.ids(), [BOS, 1, 1, 2, 2, 3, 3, EOS]);
        assert!(decode(t.ids(), &v).is_ok());

        let dangling = TokenSequence::from_ids(vec![BOS, 1, 1, SEP, 2, 2, EOS], PAD);
        let (t, _) = pad_or_truncate(&dangling, 5, &v);
        assert_eq!(t.ids(), [BOS, 1, 1, EOS, PAD]);
        assert!(decode(t.ids(), &v).is_ok());
    }

    pub(crate) fn arb_canonical(k: usize) -> impl Strategy<Value = AbstractedSketch> {
        prop::collection::vec((0..k, 1u32..12, prop::bool::weighted(0.25)), 0..30).prop_map(move |raw| {
            let mut runs: Vec<Run> = Vec::new();
            for (id, count, pen) in raw {
                let id = match runs.last() {
                    Some(prev) if !pen && prev.primitive == id => (id + 1) % k,
                    _ => id,
                };
                runs.push(Run::new(id, count, pen));
            }
            AbstractedSketch::new(runs)
        })
    }

    proptest! {
        #[test]
        fn round_trip_and_token_count(abs in arb_canonical(K)) {
            prop_assert!(abs.is_token_canonical());
            let seq = encode(&abs, &vocab()).unwrap();
            let expected = 2 + abs.total_repeats() as usize + abs.pen_up_runs();
            prop_assert_eq!(seq.len(), expected);
            prop_assert_eq!(decode(seq.ids(), &vocab()).unwrap(), abs);
        }

        #[test]
        fn padding_never_counts(abs in arb_canonical(K), extra in 0usize..20) {
            let v = vocab();
            let seq = encode(&abs, &v).unwrap();
            let max_len = seq.len().max(3) + extra;
            let (padded, cut) = pad_or_truncate(&seq, max_len, &v);
            prop_assert!(!cut);
            prop_assert_eq!(padded.attention_length(), seq.len());
            prop_assert_eq!(decode(padded.ids(), &v).unwrap(), abs);
        }
    }
}
