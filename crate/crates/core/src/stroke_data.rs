//! Sketches in stroke-3 form: QuickDraw ingestion, normalization, synthetic
//! fixtures and the binary corpus format.
//!
//! A sketch is a list of `(dx, dy, pen)` triples. The first point's offset is
//! measured from the canvas origin and only locates the start of the drawing;
//! every later offset is one stroke. `pen_up` on a point means the pen leaves
//! the canvas after that point, so the offset of the *next* point is a move in
//! the air.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stroke3Point {
    pub dx: f64,
    pub dy: f64,
    pub pen_up: bool,
}

impl Stroke3Point {
    pub const fn new(dx: f64, dy: f64, pen_up: bool) -> Self {
        Self { dx, dy, pen_up }
    }

    pub fn pen(&self) -> u8 {
        self.pen_up as u8
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sketch {
    points: Vec<Stroke3Point>,
    label: Option<String>,
}

impl Sketch {
    /// Builds a sketch, checking that it is non-empty and ends pen-up.
    pub fn new(points: Vec<Stroke3Point>, label: Option<String>) -> Result<Self> {
        match points.last() {
            None => Err(Error::InvalidSketch("sketch has no points".into())),
            Some(p) if !p.pen_up => Err(Error::InvalidSketch("final point must lift the pen".into())),
            Some(_) => Ok(Self { points, label }),
        }
    }

    pub fn points(&self) -> &[Stroke3Point] {
        &self.points
    }

    pub fn label(&self) -> Option<&str> {
        self.label.as_deref()
    }

    pub fn with_label(mut self, label: Option<String>) -> Self {
        self.label = label;
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Cumulative absolute coordinates, starting from the origin.
    pub fn absolute(&self) -> Vec<[f64; 2]> {
        integrate(&self.points)
    }

    /// Number of pen lifts that are followed by more drawing.
    pub fn pen_up_transitions(&self) -> usize {
        let n = self.points.len();
        self.points[..n - 1].iter().filter(|p| p.pen_up).count()
    }

    /// Bounding box `(min, max)` of the absolute coordinates.
    pub fn bounds(&self) -> ([f64; 2], [f64; 2]) {
        bounds(&self.absolute())
    }
}

pub(crate) fn integrate(points: &[Stroke3Point]) -> Vec<[f64; 2]> {
    let mut x = 0.0;
    let mut y = 0.0;
    points
        .iter()
        .map(|p| {
            x += p.dx;
            y += p.dy;
            [x, y]
        })
        .collect()
}

pub(crate) fn difference(absolute: &[[f64; 2]], pens: impl Iterator<Item = bool>) -> Vec<Stroke3Point> {
    let mut prev = [0.0, 0.0];
    absolute
        .iter()
        .zip(pens)
        .map(|(a, pen_up)| {
            let p = Stroke3Point::new(a[0] - prev[0], a[1] - prev[1], pen_up);
            prev = *a;
            p
        })
        .collect()
}

fn bounds(absolute: &[[f64; 2]]) -> ([f64; 2], [f64; 2]) {
    let mut min = [f64::INFINITY; 2];
    let mut max = [f64::NEG_INFINITY; 2];
    for a in absolute {
        for axis in 0..2 {
            min[axis] = min[axis].min(a[axis]);
            max[axis] = max[axis].max(a[axis]);
        }
    }
    (min, max)
}

/// Min-max normalization with one shared scale for both axes.
///
/// The minimum corner moves to the origin and both axes are divided by the
/// larger of the two ranges, so the longer side spans exactly `[0, 1]` and
/// stroke orientations are preserved.
pub fn normalize(sketch: &Sketch) -> Result<Sketch> {
    Ok(normalize_with_scale(sketch)?.0)
}

/// Like [`normalize`], also returning the range the coordinates were divided by.
pub fn normalize_with_scale(sketch: &Sketch) -> Result<(Sketch, f64)> {
    let absolute = sketch.absolute();
    let (min, max) = bounds(&absolute);
    let range = (max[0] - min[0]).max(max[1] - min[1]);
    if !range.is_finite() {
        return Err(Error::NonFinite("sketch coordinates"));
    }
    if range <= 0.0 {
        return Err(Error::DegenerateGeometry(
            "all points coincide, coordinate range is zero".into(),
        ));
    }
    let scaled: Vec<[f64; 2]> = absolute
        .iter()
        .map(|a| [(a[0] - min[0]) / range, (a[1] - min[1]) / range])
        .collect();
    let points = difference(&scaled, sketch.points.iter().map(|p| p.pen_up));
    Ok((
        Sketch {
            points,
            label: sketch.label.clone(),
        },
        range,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Square,
    Triangle,
    Circle,
    Zigzag,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Circle,
        ShapeKind::Zigzag,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Circle => "circle",
            ShapeKind::Zigzag => "zigzag",
        }
    }

    fn vertices(&self) -> Vec<[f64; 2]> {
        match self {
            ShapeKind::Square => vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.0, 0.0]],
            ShapeKind::Triangle => {
                let h = 3f64.sqrt() / 2.0;
                vec![[0.0, h], [0.5, 0.0], [1.0, h], [0.0, h]]
            }
            ShapeKind::Circle => {
                const SIDES: usize = 16;
                (0..=SIDES)
                    .map(|i| {
                        let a = std::f64::consts::TAU * (i % SIDES) as f64 / SIDES as f64;
                        [0.5 + 0.5 * a.cos(), 0.5 + 0.5 * a.sin()]
                    })
                    .collect()
            }
            ShapeKind::Zigzag => (0..=6)
                .map(|i| [i as f64 / 6.0, if i % 2 == 0 { 0.6 } else { 0.2 }])
                .collect(),
        }
    }

    fn closed(&self) -> bool {
        !matches!(self, ShapeKind::Zigzag)
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "square" => Ok(ShapeKind::Square),
            "triangle" => Ok(ShapeKind::Triangle),
            "circle" | "circle-approximation" => Ok(ShapeKind::Circle),
            "zigzag" => Ok(ShapeKind::Zigzag),
            other => Err(Error::UnknownShape(other.to_string())),
        }
    }
}

/// Deterministic single-stroke fixture, already normalized.
///
/// Every vertex is displaced by Gaussian noise with standard deviation
/// `jitter`; closed shapes end on their (jittered) starting vertex.
pub fn synthesize(shape: ShapeKind, jitter: f64, seed: u64) -> Result<Sketch> {
    if !(jitter >= 0.0 && jitter.is_finite()) {
        return Err(Error::Config(format!("jitter must be non-negative, got {jitter}")));
    }
    let mut vertices = shape.vertices();
    if jitter > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, jitter).expect("finite positive std");
        let n = if shape.closed() {
            vertices.len() - 1
        } else {
            vertices.len()
        };
        for v in vertices.iter_mut().take(n) {
            v[0] += noise.sample(&mut rng);
            v[1] += noise.sample(&mut rng);
        }
        if shape.closed() {
            let last = vertices.len() - 1;
            vertices[last] = vertices[0];
        }
    }
    let n = vertices.len();
    let mut points = difference(&vertices, (0..n).map(|i| i == n - 1));
    points[0] = Stroke3Point::new(vertices[0][0], vertices[0][1], false);
    let sketch = Sketch::new(points, Some(shape.name().to_string()))?;
    normalize(&sketch)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Validation,
    Test,
}

impl Split {
    fn to_byte(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Validation => 1,
            Split::Test => 2,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Split::Train),
            1 => Some(Split::Validation),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SketchCorpus {
    sketches: Vec<Sketch>,
    class_names: Vec<String>,
    split: Split,
}

impl SketchCorpus {
    pub fn new(sketches: Vec<Sketch>, class_names: Vec<String>, split: Split) -> Result<Self> {
        for (i, s) in sketches.iter().enumerate() {
            if let Some(label) = s.label() {
                if !class_names.iter().any(|c| c == label) {
                    return Err(Error::Data(format!(
                        "sketch {i} has label `{label}` missing from the class list"
                    )));
                }
            }
        }
        Ok(Self {
            sketches,
            class_names,
            split,
        })
    }

    pub fn sketches(&self) -> &[Sketch] {
        &self.sketches
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.sketches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sketches.is_empty()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    /// Sub-corpus holding only the listed classes, in the given order.
    pub fn restrict_classes(&self, classes: &[String]) -> Result<SketchCorpus> {
        for c in classes {
            if self.class_index(c).is_none() {
                return Err(Error::Data(format!("class `{c}` not present in corpus")));
            }
        }
        let sketches = self
            .sketches
            .iter()
            .filter(|s| s.label().is_some_and(|l| classes.iter().any(|c| c == l)))
            .cloned()
            .collect();
        SketchCorpus::new(sketches, classes.to_vec(), self.split)
    }

    /// Keeps at most `n` sketches of every class, in corpus order.
    pub fn take_per_class(&self, n: usize) -> SketchCorpus {
        let mut counts = vec![0usize; self.class_names.len()];
        let sketches = self
            .sketches
            .iter()
            .filter(|s| match s.label().and_then(|l| self.class_index(l)) {
                Some(c) if counts[c] < n => {
                    counts[c] += 1;
                    true
                }
                _ => false,
            })
            .cloned()
            .collect();
        SketchCorpus {
            sketches,
            class_names: self.class_names.clone(),
            split: self.split,
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn per_class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.class_names.len()];
        for s in &self.sketches {
            if let Some(c) = s.label().and_then(|l| self.class_index(l)) {
                counts[c] += 1;
            }
        }
        counts
    }

    /// Concatenates corpora; class lists are united in first-seen order.
    pub fn merge(parts: Vec<SketchCorpus>, split: Split) -> Result<SketchCorpus> {
        let mut class_names: Vec<String> = Vec::new();
        let mut sketches = Vec::new();
        for part in parts {
            for c in part.class_names {
                if !class_names.contains(&c) {
                    class_names.push(c);
                }
            }
            sketches.extend(part.sketches);
        }
        SketchCorpus::new(sketches, class_names, split)
    }
}

/// `per_class` jittered copies of each shape, interleaved by class.
pub fn synthetic_corpus(shapes: &[ShapeKind], per_class: usize, jitter: f64, seed: u64) -> Result<SketchCorpus> {
    let mut sketches = Vec::with_capacity(shapes.len() * per_class);
    for i in 0..per_class {
        for (c, &shape) in shapes.iter().enumerate() {
            let s = seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add((i * shapes.len() + c) as u64);
            sketches.push(synthesize(shape, jitter, s)?);
        }
    }
    let names = shapes.iter().map(|s| s.name().to_string()).collect();
    SketchCorpus::new(sketches, names, Split::Train)
}

/// A record-level problem found while parsing newline-delimited JSON.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct ParseOutcome {
    pub corpus: SketchCorpus,
    pub errors: Vec<RecordError>,
    /// Line numbers (1-based) of records skipped because their drawing was empty.
    pub skipped_empty: Vec<usize>,
}

#[derive(Deserialize)]
struct QuickDrawRecord {
    word: String,
    drawing: Vec<Vec<Vec<f64>>>,
}

/// Parses QuickDraw "simplified drawing" ndjson.
///
/// Malformed lines are collected in [`ParseOutcome::errors`] and parsing goes
/// on; empty drawings are skipped with a warning. Class names are sorted.
pub fn parse_quickdraw_ndjson<R: BufRead>(reader: R, split: Split) -> Result<ParseOutcome> {
    let mut sketches = Vec::new();
    let mut errors = Vec::new();
    let mut skipped_empty = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io("<ndjson stream>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: QuickDrawRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                errors.push(RecordError {
                    line: line_no,
                    message: e.to_string(),
                });
                continue;
            }
        };
        match drawing_to_stroke3(&record.drawing) {
            Ok(Some(points)) => sketches.push(Sketch {
                points,
                label: Some(record.word),
            }),
            Ok(None) => {
                log::warn!("line {line_no}: empty drawing skipped");
                skipped_empty.push(line_no);
            }
            Err(message) => errors.push(RecordError { line: line_no, message }),
        }
    }
    let mut class_names: Vec<String> = sketches.iter().filter_map(|s| s.label.clone()).collect();
    class_names.sort();
    class_names.dedup();
    Ok(ParseOutcome {
        corpus: SketchCorpus::new(sketches, class_names, split)?,
        errors,
        skipped_empty,
    })
}

pub fn parse_quickdraw_file(path: &Path, split: Split) -> Result<ParseOutcome> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_quickdraw_ndjson(BufReader::new(file), split)
}

fn drawing_to_stroke3(drawing: &[Vec<Vec<f64>>]) -> std::result::Result<Option<Vec<Stroke3Point>>, String> {
    let mut absolute = Vec::new();
    let mut pens = Vec::new();
    for (s, stroke) in drawing.iter().enumerate() {
        if stroke.len() < 2 {
            return Err(format!("stroke {s} needs x and y arrays"));
        }
        let (xs, ys) = (&stroke[0], &stroke[1]);
        if xs.len() != ys.len() {
            return Err(format!(
                "stroke {s} has {} x values but {} y values",
                xs.len(),
                ys.len()
            ));
        }
        if xs.iter().chain(ys.iter()).any(|v| !v.is_finite()) {
            return Err(format!("stroke {s} has non-finite coordinates"));
        }
        for (i, (&x, &y)) in xs.iter().zip(ys).enumerate() {
            absolute.push([x, y]);
            pens.push(i + 1 == xs.len());
        }
    }
    let Some(&first) = absolute.first() else {
        return Ok(None);
    };
    // offsets measured from the first point, so the anchor offset is (0, 0)
    let shifted: Vec<[f64; 2]> = absolute.iter().map(|a| [a[0] - first[0], a[1] - first[1]]).collect();
    Ok(Some(difference(&shifted, pens.into_iter())))
}

pub const CORPUS_MAGIC: [u8; 4] = *b"PSKC";
pub const CORPUS_FORMAT_VERSION: u32 = 1;
const NO_LABEL: u32 = u32::MAX;
const POINT_BYTES: usize = 17;

#[derive(Serialize, Deserialize)]
struct CorpusSidecar {
    format_version: u32,
    split: Split,
    class_names: Vec<String>,
}

/// Sidecar path holding class names: `<path>.classes.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".classes.json");
    PathBuf::from(name)
}

pub fn encode_corpus(corpus: &SketchCorpus) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CORPUS_MAGIC);
    out.extend_from_slice(&CORPUS_FORMAT_VERSION.to_le_bytes());
    out.push(corpus.split.to_byte());
    out.extend_from_slice(&(corpus.sketches.len() as u64).to_le_bytes());
    for sketch in &corpus.sketches {
        let label = sketch
            .label()
            .and_then(|l| corpus.class_index(l))
            .map_or(NO_LABEL, |i| i as u32);
        let payload_len = 8 + POINT_BYTES * sketch.points.len();
        out.extend_from_slice(&(payload_len as u32).to_le_bytes());
        out.extend_from_slice(&label.to_le_bytes());
        out.extend_from_slice(&(sketch.points.len() as u32).to_le_bytes());
        for p in &sketch.points {
            out.extend_from_slice(&p.dx.to_le_bytes());
            out.extend_from_slice(&p.dy.to_le_bytes());
            out.push(p.pen());
        }
    }
    out
}

pub fn save_corpus(corpus: &SketchCorpus, path: &Path) -> Result<()> {
    let bytes = encode_corpus(corpus);
    let mut file = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    file.flush().map_err(|e| Error::io(path, e))?;
    let sidecar = CorpusSidecar {
        format_version: CORPUS_FORMAT_VERSION,
        split: corpus.split,
        class_names: corpus.class_names.clone(),
    };
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&sidecar)?;
    std::fs::write(&side, json).map_err(|e| Error::io(side, e))
}

pub fn load_corpus(path: &Path) -> Result<SketchCorpus> {
    let side = sidecar_path(path);
    let meta: CorpusSidecar = {
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        serde_json::from_str(&text).map_err(|e| Error::corrupt(&side, e.to_string()))?
    };
    if meta.format_version != CORPUS_FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: side,
            found: meta.format_version,
            expected: CORPUS_FORMAT_VERSION,
        });
    }
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_corpus(&bytes, meta.class_names, path)
}

fn decode_corpus(bytes: &[u8], class_names: Vec<String>, path: &Path) -> Result<SketchCorpus> {
    let mut r = ByteReader::new(bytes, path);
    if r.take(4)? != CORPUS_MAGIC {
        return Err(Error::corrupt(path, "bad magic bytes"));
    }
    let version = r.u32()?;
    if version != CORPUS_FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: CORPUS_FORMAT_VERSION,
        });
    }
    let split = Split::from_byte(r.u8()?).ok_or_else(|| Error::corrupt(path, "unknown split tag"))?;
    let count = r.u64()? as usize;
    let mut sketches = Vec::with_capacity(count.min(1 << 20));
    for i in 0..count {
        let payload_len = r.u32()? as usize;
        let label = r.u32()?;
        let n = r.u32()? as usize;
        if payload_len != 8 + POINT_BYTES * n {
            return Err(Error::corrupt(path, format!("record {i} has inconsistent length")));
        }
        let mut points = Vec::with_capacity(n);
        for _ in 0..n {
            let dx = r.f64()?;
            let dy = r.f64()?;
            let pen_up = match r.u8()? {
                0 => false,
                1 => true,
                other => return Err(Error::corrupt(path, format!("pen state {other} in record {i}"))),
            };
            points.push(Stroke3Point { dx, dy, pen_up });
        }
        let label = if label == NO_LABEL {
            None
        } else {
            Some(
                class_names
                    .get(label as usize)
                    .ok_or_else(|| Error::corrupt(path, format!("record {i} label index {label} out of range")))?
                    .clone(),
            )
        };
        let sketch = Sketch::new(points, label).map_err(|e| Error::corrupt(path, format!("record {i}: {e}")))?;
        sketches.push(sketch);
    }
    if !r.is_done() {
        return Err(Error::corrupt(path, "trailing bytes after last record"));
    }
    SketchCorpus::new(sketches, class_names, split)
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, pos: 0, path }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::corrupt(
                self.path,
                format!("truncated: needed {n} bytes at offset {}", self.pos),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pts(v: &[(f64, f64, u8)]) -> Vec<Stroke3Point> {
        v.iter().map(|&(x, y, p)| Stroke3Point::new(x, y, p == 1)).collect()
    }

    #[test]
    fn parse_single_stroke() {
        let input = r#"{"word":"line","drawing":[[[0,10,10],[0,0,5]]]}"#;
        let out = parse_quickdraw_ndjson(input.as_bytes(), Split::Train).unwrap();
        assert_eq!(out.corpus.len(), 1);
        let s = &out.corpus.sketches()[0];
        assert_eq!(
            s.points(),
            pts(&[(0.0, 0.0, 0), (10.0, 0.0, 0), (0.0, 5.0, 1)]).as_slice()
        );
        assert_eq!(s.label(), Some("line"));
    }

    #[test]
    fn parse_two_strokes_marks_two_pen_lifts() {
        let input = r#"{"word":"eq","drawing":[[[0,10],[0,0]],[[0,10,20],[5,5,5]]]}"#;
        let out = parse_quickdraw_ndjson(input.as_bytes(), Split::Train).unwrap();
        let s = &out.corpus.sketches()[0];
        assert_eq!(s.points().iter().filter(|p| p.pen_up).count(), 2);
        assert!(s.points().last().unwrap().pen_up);
        assert_eq!(s.points()[2], Stroke3Point::new(-10.0, 5.0, false));
    }

    #[test]
    fn parse_skips_empty_and_reports_malformed() {
        let input = "{\"word\":\"a\",\"drawing\":[]}\nnot json\n{\"word\":\"b\",\"drawing\":[[[0,1],[0,1]]]}\n{\"word\":\"c\",\"drawing\":[[[0,1],[0]]]}\n";
        let out = parse_quickdraw_ndjson(input.as_bytes(), Split::Test).unwrap();
        assert_eq!(out.corpus.len(), 1);
        assert_eq!(out.skipped_empty, vec![1]);
        assert_eq!(out.errors.len(), 2);
        assert_eq!(out.errors[0].line, 2);
        assert_eq!(out.errors[1].line, 4);
        assert_eq!(out.corpus.class_names(), ["b".to_string()]);
    }

    #[test]
    fn normalize_uses_shared_scale() {
        let s = Sketch::new(pts(&[(0.0, 0.0, 0), (200.0, 100.0, 1)]), None).unwrap();
        let n = normalize(&s).unwrap();
        let (min, max) = n.bounds();
        assert_eq!(min, [0.0, 0.0]);
        assert!((max[0] - 1.0).abs() < 1e-15);
        assert!((max[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn normalize_rejects_single_point() {
        let s = Sketch::new(pts(&[(3.0, 4.0, 1)]), None).unwrap();
        assert!(matches!(normalize(&s), Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn sketch_requires_final_pen_up() {
        assert!(Sketch::new(pts(&[(0.0, 0.0, 0), (1.0, 0.0, 0)]), None).is_err());
        assert!(Sketch::new(vec![], None).is_err());
    }

    #[test]
    fn square_fixture_has_four_equal_axis_aligned_strokes() {
        for seed in [0, 7, 99] {
            let s = synthesize(ShapeKind::Square, 0.0, seed).unwrap();
            let strokes = &s.points()[1..];
            assert_eq!(strokes.len(), 4);
            for p in strokes {
                assert!(p.dx == 0.0 || p.dy == 0.0);
                assert!(((p.dx.abs() + p.dy.abs()) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn synthesize_is_deterministic_and_seed_sensitive() {
        let a = synthesize(ShapeKind::Zigzag, 0.01, 1).unwrap();
        let b = synthesize(ShapeKind::Zigzag, 0.01, 1).unwrap();
        let c = synthesize(ShapeKind::Zigzag, 0.01, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!("hexagon".parse::<ShapeKind>().is_err());
        assert!(synthesize(ShapeKind::Circle, -1.0, 0).is_err());
    }

    #[test]
    fn corpus_round_trip_and_truncation() {
        let sketches: Vec<Sketch> = (0..100)
            .map(|i| synthesize(ShapeKind::ALL[i % 4], 0.02, i as u64).unwrap())
            .collect();
        let names = ShapeKind::ALL.iter().map(|s| s.name().to_string()).collect();
        let corpus = SketchCorpus::new(sketches, names, Split::Validation).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        save_corpus(&corpus, &path).unwrap();
        let loaded = load_corpus(&path).unwrap();
        assert_eq!(loaded, corpus);
        assert_eq!(encode_corpus(&loaded), std::fs::read(&path).unwrap());

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_corpus(&path), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn empty_corpus_round_trip() {
        let corpus = SketchCorpus::new(vec![], vec!["cat".into(), "owl".into()], Split::Test).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.bin");
        save_corpus(&corpus, &path).unwrap();
        let loaded = load_corpus(&path).unwrap();
        assert!(loaded.is_empty());
        assert_eq!(loaded.class_names(), corpus.class_names());
    }

    #[test]
    fn version_mismatch_is_reported() {
        let corpus = SketchCorpus::new(vec![], vec![], Split::Train).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.bin");
        save_corpus(&corpus, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9;
        std::fs::write(&path, bytes).unwrap();
        match load_corpus(&path) {
            Err(Error::VersionMismatch { found, expected, .. }) => {
                assert_eq!((found, expected), (9, CORPUS_FORMAT_VERSION))
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    fn arb_sketch() -> impl Strategy<Value = Sketch> {
        prop::collection::vec((-50.0..50.0f64, -50.0..50.0f64, prop::bool::weighted(0.2)), 2..40).prop_map(|v| {
            let n = v.len();
            let points = v
                .into_iter()
                .enumerate()
                .map(|(i, (x, y, p))| Stroke3Point::new(x, y, p || i == n - 1))
                .collect();
            Sketch::new(points, None).unwrap()
        })
    }

    proptest! {
        #[test]
        fn integrate_then_difference_is_identity(s in arb_sketch()) {
            let abs = s.absolute();
            let back = difference(&abs, s.points().iter().map(|p| p.pen_up));
            for (a, b) in s.points().iter().zip(&back) {
                prop_assert!((a.dx - b.dx).abs() <= 1e-12 * (1.0 + a.dx.abs()));
                prop_assert!((a.dy - b.dy).abs() <= 1e-12 * (1.0 + a.dy.abs()));
                prop_assert_eq!(a.pen_up, b.pen_up);
            }
        }

        #[test]
        fn normalize_is_idempotent_and_bounded(s in arb_sketch()) {
            let once = normalize(&s).unwrap();
            let twice = normalize(&once).unwrap();
            for a in once.absolute() {
                prop_assert!(a[0] >= -1e-12 && a[0] <= 1.0 + 1e-12);
                prop_assert!(a[1] >= -1e-12 && a[1] <= 1.0 + 1e-12);
            }
            for (a, b) in once.points().iter().zip(twice.points()) {
                prop_assert!((a.dx - b.dx).abs() < 1e-12);
                prop_assert!((a.dy - b.dy).abs() < 1e-12);
            }
        }
    }
}
