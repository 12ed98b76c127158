//! Stroke-to-primitive abstraction.
//!
//! Each stroke is replaced by the dictionary primitive with the highest cosine
//! similarity, repeated `ceil(|s| / |p|)` times. Pen-up moves go through the
//! same mapping and are flagged so disconnected strokes can be placed again.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stroke_data::{normalize, Sketch, Stroke3Point};

/// Similarities closer than this are treated as ties.
const TIE_EPSILON: f64 = 1e-12;
/// Slack on the ceiling so exact multiples are not bumped up by rounding noise.
const CEIL_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AbstractionConfig {
    pub orientations: usize,
    pub primitive_length: f64,
}

impl Default for AbstractionConfig {
    fn default() -> Self {
        Self {
            orientations: 36,
            primitive_length: 0.05,
        }
    }
}

impl AbstractionConfig {
    pub fn dictionary(&self) -> Result<PrimitiveDictionary> {
        PrimitiveDictionary::new(self.orientations, self.primitive_length)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub id: usize,
    pub direction: [f64; 2],
    pub length: f64,
}

impl Primitive {
    pub fn vector(&self) -> [f64; 2] {
        [self.direction[0] * self.length, self.direction[1] * self.length]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrimitiveDictionary {
    primitives: Vec<Primitive>,
    primitive_length: f64,
}

impl PrimitiveDictionary {
    /// `k` unit directions at `2π/k` spacing starting at angle 0, all with the
    /// same length.
    pub fn new(k: usize, length: f64) -> Result<Self> {
        if k < 4 {
            return Err(Error::DictionaryTooCoarse(k));
        }
        if !(length > 0.0 && length.is_finite()) {
            return Err(Error::InvalidPrimitiveLength(length));
        }
        let primitives = (0..k)
            .map(|id| {
                let angle = TAU * id as f64 / k as f64;
                Primitive {
                    id,
                    direction: [angle.cos(), angle.sin()],
                    length,
                }
            })
            .collect();
        Ok(Self {
            primitives,
            primitive_length: length,
        })
    }

    pub fn primitives(&self) -> &[Primitive] {
        &self.primitives
    }

    pub fn orientation_count(&self) -> usize {
        self.primitives.len()
    }

    pub fn primitive_length(&self) -> f64 {
        self.primitive_length
    }

    pub fn get(&self, id: usize) -> Result<&Primitive> {
        self.primitives.get(id).ok_or(Error::UnknownPrimitive {
            id,
            size: self.primitives.len(),
        })
    }

    pub fn config(&self) -> AbstractionConfig {
        AbstractionConfig {
            orientations: self.orientation_count(),
            primitive_length: self.primitive_length,
        }
    }
}

fn norm(v: [f64; 2]) -> f64 {
    v[0].hypot(v[1])
}

/// Cosine similarity between a stroke vector and a primitive's direction.
pub fn similarity(stroke: [f64; 2], primitive: &Primitive) -> Result<f64> {
    let ns = norm(stroke);
    if ns == 0.0 {
        return Err(Error::ZeroStroke);
    }
    let d = primitive.direction;
    let dot = stroke[0] * d[0] + stroke[1] * d[1];
    Ok((dot / (ns * norm(d))).clamp(-1.0, 1.0))
}

/// The most similar primitive; the lowest id wins a tie.
pub fn map_stroke(stroke: [f64; 2], dict: &PrimitiveDictionary) -> Result<&Primitive> {
    let mut best = &dict.primitives[0];
    let mut best_sim = similarity(stroke, best)?;
    for p in &dict.primitives[1..] {
        let sim = similarity(stroke, p)?;
        if sim > best_sim + TIE_EPSILON {
            best = p;
            best_sim = sim;
        }
    }
    Ok(best)
}

/// `ceil(|s| / |p|)`, never less than one.
pub fn scale_factor(stroke: [f64; 2], primitive: &Primitive) -> Result<u32> {
    let m = norm(stroke);
    if m == 0.0 {
        return Err(Error::ZeroStroke);
    }
    let ratio = m / primitive.length;
    Ok((ratio - CEIL_SLACK).ceil().max(1.0) as u32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Run {
    pub primitive: usize,
    pub count: u32,
    pub pen_up_move: bool,
}

impl Run {
    pub const fn new(primitive: usize, count: u32, pen_up_move: bool) -> Self {
        Self {
            primitive,
            count,
            pen_up_move,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AbstractedSketch {
    pub runs: Vec<Run>,
}

impl AbstractedSketch {
    pub fn new(runs: Vec<Run>) -> Self {
        Self { runs }
    }

    pub fn pen_up_runs(&self) -> usize {
        self.runs.iter().filter(|r| r.pen_up_move).count()
    }

    pub fn total_repeats(&self) -> u64 {
        self.runs.iter().map(|r| r.count as u64).sum()
    }

    /// True when the token form identifies every run boundary: a run that is
    /// not a pen-up move never repeats the primitive of the run before it.
    ///
    /// Outside this set the repeated-token encoding merges adjacent runs.
    pub fn is_token_canonical(&self) -> bool {
        self.runs.iter().all(|r| r.count >= 1)
            && self
                .runs
                .windows(2)
                .all(|w| w[1].pen_up_move || w[0].primitive != w[1].primitive)
    }
}

/// Maps every non-zero stroke of a sketch to one run.
///
/// The first point only anchors the drawing. Zero-length offsets are dropped;
/// a dropped pen lift is carried over to the next kept stroke.
pub fn abstract_sketch(sketch: &Sketch, dict: &PrimitiveDictionary) -> Result<AbstractedSketch> {
    let points = sketch.points();
    let mut runs = Vec::with_capacity(points.len());
    let mut pending_lift = false;
    for pair in points.windows(2) {
        let (prev, cur) = (pair[0], pair[1]);
        let stroke = [cur.dx, cur.dy];
        if !(stroke[0].is_finite() && stroke[1].is_finite()) {
            return Err(Error::NonFinite("stroke offsets"));
        }
        let lifted = pending_lift || prev.pen_up;
        if norm(stroke) == 0.0 {
            pending_lift = lifted;
            continue;
        }
        let primitive = map_stroke(stroke, dict)?;
        runs.push(Run {
            primitive: primitive.id,
            count: scale_factor(stroke, primitive)?,
            pen_up_move: lifted,
        });
        pending_lift = false;
    }
    if runs.is_empty() {
        return Err(Error::DegenerateGeometry("sketch has no non-zero strokes".into()));
    }
    Ok(AbstractedSketch { runs })
}

/// Expands each run into one stroke-3 offset of `count * length * direction`
/// without rescaling. The anchor point sits at the origin.
pub fn reconstruct_raw(abs: &AbstractedSketch, dict: &PrimitiveDictionary) -> Result<Sketch> {
    let first_lift = abs.runs.first().is_some_and(|r| r.pen_up_move);
    let mut points = Vec::with_capacity(abs.runs.len() + 1);
    points.push(Stroke3Point::new(0.0, 0.0, first_lift));
    for (i, run) in abs.runs.iter().enumerate() {
        let p = dict.get(run.primitive)?;
        let c = run.count as f64;
        let lift_after = abs.runs.get(i + 1).is_none_or(|r| r.pen_up_move);
        points.push(Stroke3Point::new(
            c * p.length * p.direction[0],
            c * p.length * p.direction[1],
            lift_after,
        ));
    }
    let n = points.len();
    points[n - 1].pen_up = true;
    Sketch::new(points, None)
}

/// [`reconstruct_raw`] followed by normalization.
pub fn reconstruct(abs: &AbstractedSketch, dict: &PrimitiveDictionary) -> Result<Sketch> {
    normalize(&reconstruct_raw(abs, dict)?)
}
