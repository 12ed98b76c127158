//! Token sequences back to drawable polylines, plus SVG export.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TokenErrorKind};
use crate::primitives::{AbstractedSketch, PrimitiveDictionary};
use crate::tokenizer::{decode, TokenId, Vocabulary};

/// Drawing start before fitting to the unit box.
pub const ANCHOR: [f64; 2] = [0.5, 0.5];

/// One pen-up-delimited stroke group in `[0, 1]²`.
///
/// `pen_down[i]` says whether the segment from `points[i]` to
/// `points[i + 1]` is drawn. Only a leading segment can be a pen-up move.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    pub points: Vec<[f64; 2]>,
    pub pen_down: Vec<bool>,
}

impl Polyline {
    pub fn segments(&self) -> usize {
        self.pen_down.len()
    }

    /// First and last drawn point coincide within `tol`.
    pub fn is_closed(&self, tol: f64) -> bool {
        let start = self.pen_down.iter().position(|&d| d).map(|i| self.points[i]);
        match (start, self.points.last()) {
            (Some(a), Some(b)) => (a[0] - b[0]).hypot(a[1] - b[1]) <= tol,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RepairAction {
    /// Input had no BOS; one was assumed.
    ImpliedBos,
    /// A SEP with nothing to separate was removed.
    DroppedSep,
    /// Everything from this token on was discarded.
    Truncated,
    /// Input ended without EOS; one was assumed.
    ImpliedEos,
}

/// What the tolerant decoder changed, and why.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Repair {
    pub position: usize,
    pub kind: TokenErrorKind,
    pub action: RepairAction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rendering {
    pub polylines: Vec<Polyline>,
    pub repairs: Vec<Repair>,
}

/// Rewrites any token sequence into one that [`decode`] accepts, recording
/// each change. Sequences that already decode come back unchanged.
pub fn repair_tokens(tokens: &[TokenId], vocab: &Vocabulary) -> (Vec<TokenId>, Vec<Repair>) {
    let mut repairs = Vec::new();
    let mut out = vec![vocab.bos()];
    let mut start = 1;
    if tokens.first() != Some(&vocab.bos()) {
        repairs.push(Repair {
            position: 0,
            kind: TokenErrorKind::MissingBos,
            action: RepairAction::ImpliedBos,
        });
        start = 0;
    }
    let mut pending_sep: Option<usize> = None;
    let mut finished = false;
    for (pos, &t) in tokens.iter().enumerate().skip(start) {
        if t == vocab.eos() {
            finished = true;
            break;
        }
        if vocab.is_primitive(t) {
            if pending_sep.take().is_some() {
                out.push(vocab.sep());
            }
            out.push(t);
        } else if t == vocab.sep() {
            if let Some(prev) = pending_sep.replace(pos) {
                repairs.push(Repair {
                    position: prev,
                    kind: TokenErrorKind::ConsecutiveSep,
                    action: RepairAction::DroppedSep,
                });
            }
        } else {
            let kind = if t == vocab.bos() {
                TokenErrorKind::UnexpectedBos
            } else if t == vocab.pad() {
                TokenErrorKind::PadBeforeEos
            } else {
                TokenErrorKind::UnknownId(t)
            };
            repairs.push(Repair {
                position: pos,
                kind,
                action: RepairAction::Truncated,
            });
            finished = true;
            break;
        }
    }
    if let Some(pos) = pending_sep {
        repairs.push(Repair {
            position: pos,
            kind: TokenErrorKind::TerminalSep,
            action: RepairAction::DroppedSep,
        });
    }
    if !finished {
        repairs.push(Repair {
            position: tokens.len(),
            kind: TokenErrorKind::MissingEos,
            action: RepairAction::ImpliedEos,
        });
    }
    out.push(vocab.eos());
    (out, repairs)
}

/// Integrates the primitive vectors of a token sequence from [`ANCHOR`]
/// and fits the result into the unit box.
///
/// Each SEP starts a new polyline whose first segment is the pen-up move.
/// A sequence that opens with SEP has no polyline before it. In tolerant
/// mode structural faults are repaired (see [`repair_tokens`]); in strict
/// mode they are returned as [`crate::Error::Token`].
pub fn tokens_to_polylines(
    tokens: &[TokenId],
    dict: &PrimitiveDictionary,
    vocab: &Vocabulary,
    tolerant: bool,
) -> Result<Rendering> {
    let (abs, repairs) = if tolerant {
        let (fixed, repairs) = repair_tokens(tokens, vocab);
        (decode(&fixed, vocab)?, repairs)
    } else {
        (decode(tokens, vocab)?, Vec::new())
    };
    Ok(Rendering {
        polylines: abstracted_to_polylines(&abs, dict)?,
        repairs,
    })
}

/// Polylines of an abstracted sketch, one point per run.
pub fn abstracted_to_polylines(abs: &AbstractedSketch, dict: &PrimitiveDictionary) -> Result<Vec<Polyline>> {
    let mut lines = Vec::new();
    let mut current = Polyline {
        points: vec![ANCHOR],
        pen_down: Vec::new(),
    };
    let mut at = ANCHOR;
    for run in &abs.runs {
        let v = dict.get(run.primitive)?.vector();
        let c = run.count as f64;
        let next = [at[0] + c * v[0], at[1] + c * v[1]];
        if run.pen_up_move {
            let done = std::mem::replace(
                &mut current,
                Polyline {
                    points: vec![at],
                    pen_down: Vec::new(),
                },
            );
            if done.segments() > 0 {
                lines.push(done);
            }
        }
        current.points.push(next);
        current.pen_down.push(!run.pen_up_move);
        at = next;
    }
    if current.segments() > 0 {
        lines.push(current);
    }
    fit_unit_box(&mut lines);
    Ok(lines)
}

/// Scales by the larger side so it spans `[0, 1]` and centers the other.
fn fit_unit_box(lines: &mut [Polyline]) {
    let mut min = [f64::INFINITY; 2];
    let mut max = [f64::NEG_INFINITY; 2];
    for p in lines.iter().flat_map(|l| &l.points) {
        for a in 0..2 {
            min[a] = min[a].min(p[a]);
            max[a] = max[a].max(p[a]);
        }
    }
    let range = (max[0] - min[0]).max(max[1] - min[1]);
    if !(range > 0.0 && range.is_finite()) {
        return;
    }
    let offset = [
        (1.0 - (max[0] - min[0]) / range) / 2.0,
        (1.0 - (max[1] - min[1]) / range) / 2.0,
    ];
    for p in lines.iter_mut().flat_map(|l| l.points.iter_mut()) {
        for a in 0..2 {
            p[a] = ((p[a] - min[a]) / range + offset[a]).clamp(0.0, 1.0);
        }
    }
}

/// Smallest canvas `to_svg` accepts; smaller values are raised to it.
pub const MIN_CANVAS_PX: u32 = 16;

/// Canvas position of a unit-box point, inset so strokes stay visible.
fn to_canvas(p: [f64; 2], canvas: f64, inset: f64) -> [f64; 2] {
    let span = canvas - 2.0 * inset;
    [inset + p[0] * span, inset + p[1] * span]
}

fn canvas_inset(stroke_width: f64, canvas: f64) -> f64 {
    (stroke_width / 2.0).clamp(0.0, canvas / 4.0)
}

/// Standalone SVG 1.1 document with one `path` per polyline.
pub fn to_svg(polylines: &[Polyline], stroke_width: f64, canvas_px: u32) -> String {
    let px = canvas_px.max(MIN_CANVAS_PX);
    let canvas = px as f64;
    let width = if stroke_width.is_finite() && stroke_width > 0.0 {
        stroke_width
    } else {
        1.0
    };
    let inset = canvas_inset(width, canvas);
    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{px}\" height=\"{px}\" viewBox=\"0 0 {px} {px}\">"
    );
    let _ = write!(
        svg,
        "<g fill=\"none\" stroke=\"black\" stroke-width=\"{}\" stroke-linecap=\"round\" stroke-linejoin=\"round\">",
        fmt_num(width)
    );
    for line in polylines {
        svg.push_str("<path d=\"");
        for (i, p) in line.points.iter().enumerate() {
            let q = to_canvas(*p, canvas, inset);
            let cmd = if i == 0 || !line.pen_down[i - 1] { 'M' } else { 'L' };
            if i > 0 {
                svg.push(' ');
            }
            let _ = write!(svg, "{cmd}{} {}", fmt_num(q[0]), fmt_num(q[1]));
        }
        svg.push_str("\"/>");
    }
    svg.push_str("</g></svg>\n");
    svg
}

fn fmt_num(v: f64) -> String {
    let s = format!("{v:.2}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

/// 8-bit grayscale PNG, black strokes on white, stamped with square pens.
#[cfg(feature = "raster")]
pub fn to_png(polylines: &[Polyline], stroke_width: f64, canvas_px: u32) -> Result<Vec<u8>> {
    use image::{GrayImage, ImageFormat, Luma};

    let px = canvas_px.max(MIN_CANVAS_PX);
    let canvas = px as f64;
    let width = if stroke_width.is_finite() && stroke_width > 0.0 {
        stroke_width
    } else {
        1.0
    };
    let inset = canvas_inset(width, canvas);
    let radius = (width / 2.0).max(0.5);
    let mut img = GrayImage::from_pixel(px, px, Luma([255]));
    let mut stamp = |c: [f64; 2]| {
        let (x0, x1) = (
            (c[0] - radius).floor().max(0.0),
            (c[0] + radius).ceil().min(canvas - 1.0),
        );
        let (y0, y1) = (
            (c[1] - radius).floor().max(0.0),
            (c[1] + radius).ceil().min(canvas - 1.0),
        );
        for y in y0 as u32..=y1 as u32 {
            for x in x0 as u32..=x1 as u32 {
                img.put_pixel(x, y, Luma([0]));
            }
        }
    };
    for line in polylines {
        for (i, seg) in line.points.windows(2).enumerate() {
            if !line.pen_down[i] {
                continue;
            }
            let (a, b) = (to_canvas(seg[0], canvas, inset), to_canvas(seg[1], canvas, inset));
            let steps = ((b[0] - a[0]).hypot(b[1] - a[1]) / 0.5).ceil().max(1.0) as usize;
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                stamp([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
            }
        }
    }
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| crate::Error::Data(format!("png encoding failed: {e}")))?;
    Ok(out.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::primitives::{abstract_sketch, AbstractionConfig, Run};
    use crate::stroke_data::{normalize, synthesize, ShapeKind};
    use crate::tokenizer::{encode, tests::arb_canonical};
    use proptest::prelude::*;

    fn setup() -> (PrimitiveDictionary, Vocabulary) {
        let dict = AbstractionConfig::default().dictionary().unwrap();
        let vocab = Vocabulary::for_dictionary(&dict);
        (dict, vocab)
    }

    #[test]
    fn square_is_one_closed_four_segment_polyline() {
        let (dict, vocab) = setup();
        let sq = normalize(&synthesize(ShapeKind::Square, 0.0, 0).unwrap()).unwrap();
        let seq = encode(&abstract_sketch(&sq, &dict).unwrap(), &vocab).unwrap();
        let r = tokens_to_polylines(seq.ids(), &dict, &vocab, false).unwrap();
        assert_eq!(r.polylines.len(), 1);
        assert_eq!(r.polylines[0].segments(), 4);
        assert!(r.polylines[0].is_closed(dict.primitive_length()));
        assert!(r.repairs.is_empty());
    }

    #[test]
    fn dangling_sep_is_repaired_or_rejected() {
        let (dict, vocab) = setup();
        let toks = [vocab.bos(), 0, vocab.sep(), vocab.eos()];
        let r = tokens_to_polylines(&toks, &dict, &vocab, true).unwrap();
        assert_eq!(r.polylines.len(), 1);
        assert_eq!(
            r.repairs,
            [Repair {
                position: 2,
                kind: TokenErrorKind::TerminalSep,
                action: RepairAction::DroppedSep
            }]
        );
        assert!(matches!(
            tokens_to_polylines(&toks, &dict, &vocab, false),
            Err(crate::Error::Token {
                kind: TokenErrorKind::TerminalSep,
                ..
            })
        ));
    }

    #[test]
    fn repairs_cover_each_fault() {
        let (_, vocab) = setup();
        let (b, s, e, p) = (vocab.bos(), vocab.sep(), vocab.eos(), vocab.pad());
        let (fixed, reps) = repair_tokens(&[3, s, s, 4, p, 5], &vocab);
        assert_eq!(fixed, [b, 3, s, 4, e]);
        let actions: Vec<_> = reps.iter().map(|r| r.action).collect();
        assert_eq!(
            actions,
            [
                RepairAction::ImpliedBos,
                RepairAction::DroppedSep,
                RepairAction::Truncated
            ]
        );
        let (fixed, reps) = repair_tokens(&[b, 1, 1], &vocab);
        assert_eq!(fixed, [b, 1, 1, e]);
        assert_eq!(reps[0].action, RepairAction::ImpliedEos);
        let (fixed, reps) = repair_tokens(&[b, 2, e, 99], &vocab);
        assert_eq!(fixed, [b, 2, e]);
        assert!(reps.is_empty());
    }

    #[test]
    fn leading_move_has_no_empty_polyline() {
        let (dict, _) = setup();
        let abs = AbstractedSketch::new(vec![Run::new(0, 2, true), Run::new(9, 3, false)]);
        let lines = abstracted_to_polylines(&abs, &dict).unwrap();
        assert_eq!(lines.len(), 1);
        assert_eq!(lines[0].pen_down, [false, true]);
    }

    #[test]
    fn empty_svg_has_no_paths() {
        let svg = to_svg(&[], 2.0, 64);
        assert!(svg.starts_with("<svg "));
        assert!(svg.contains("viewBox=\"0 0 64 64\""));
        assert!(!svg.contains("<path"));
    }

    #[test]
    fn two_strokes_two_paths() {
        let (dict, vocab) = setup();
        let abs = AbstractedSketch::new(vec![
            Run::new(0, 4, false),
            Run::new(9, 2, true),
            Run::new(18, 4, false),
        ]);
        let seq = encode(&abs, &vocab).unwrap();
        let r = tokens_to_polylines(seq.ids(), &dict, &vocab, false).unwrap();
        let svg = to_svg(&r.polylines, 3.0, 128);
        assert_eq!(svg.matches("<path").count(), 2);
        assert!(svg.contains("stroke-linecap=\"round\""));
        assert!(svg.contains("stroke-linejoin=\"round\""));
        assert_eq!(svg, to_svg(&r.polylines, 3.0, 128));
    }

    #[test]
    fn tiny_canvas_is_raised() {
        assert!(to_svg(&[], 1.0, 4).contains("width=\"16\""));
    }

    #[test]
    fn numbers_are_compact() {
        assert_eq!(fmt_num(3.0), "3");
        assert_eq!(fmt_num(2.5), "2.5");
        assert_eq!(fmt_num(-0.001), "0");
        assert_eq!(fmt_num(1.237), "1.24");
    }

    #[cfg(feature = "raster")]
    #[test]
    fn png_has_signature() {
        let line = Polyline {
            points: vec![[0.0, 0.0], [1.0, 1.0]],
            pen_down: vec![true],
        };
        let png = to_png(&[line], 2.0, 32).unwrap();
        assert_eq!(&png[..8], b"\x89PNG\r\n\x1a\n");
    }

    proptest! {
        #[test]
        fn polyline_count_tracks_pen_lifts(abs in arb_canonical(36)) {
            let (dict, vocab) = setup();
            let seq = encode(&abs, &vocab).unwrap();
            let r = tokens_to_polylines(seq.ids(), &dict, &vocab, false).unwrap();
            let leading = usize::from(abs.runs.first().is_some_and(|r| r.pen_up_move));
            let expected = if abs.runs.is_empty() { 0 } else { 1 + abs.pen_up_runs() - leading };
            prop_assert_eq!(r.polylines.len(), expected);
            for l in &r.polylines {
                prop_assert!(l.points.len() >= 2);
                prop_assert!(l.points.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
            }
        }

        #[test]
        fn tolerant_decode_never_fails(toks in proptest::collection::vec(0u32..45, 0..40)) {
            let (dict, vocab) = setup();
            let r = tokens_to_polylines(&toks, &dict, &vocab, true);
            prop_assert!(r.is_ok());
            let svg = to_svg(&r.unwrap().polylines, 2.0, 100);
            prop_assert!(svg.ends_with("</svg>\n"));
        }
    }
}
