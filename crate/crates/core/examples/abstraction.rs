//! Maps a synthetic sketch onto primitive runs and measures what the
//! reconstruction loses.
//!
//! `cargo run --example abstraction -- [circle|square|triangle|zigzag] [orientations]`

use primsketch::primitives::{abstract_sketch, reconstruct_raw, AbstractionConfig};
use primsketch::stroke_data::{synthesize, ShapeKind};

fn main() -> primsketch::Result<()> {
    let mut args = std::env::args().skip(1);
    let shape: ShapeKind = args.next().as_deref().unwrap_or("circle").parse()?;
    let orientations = args
        .next()
        .map_or(36, |k| k.parse().expect("orientations must be an integer"));
    let config = AbstractionConfig {
        orientations,
        ..AbstractionConfig::default()
    };
    let dict = config.dictionary()?;
    let sketch = synthesize(shape, 0.02, 1)?;
    let abs = abstract_sketch(&sketch, &dict)?;
    let rebuilt = reconstruct_raw(&abs, &dict)?;

    println!(
        "{shape}: {} points -> {} runs, {} primitive tokens",
        sketch.len(),
        abs.runs.len(),
        abs.total_repeats()
    );
    println!(
        "{:>4} {:>9} {:>6} {:>9} {:>9}",
        "run", "primitive", "count", "len err", "angle err"
    );
    for (i, (run, (s, r))) in abs
        .runs
        .iter()
        .zip(sketch.points()[1..].iter().zip(&rebuilt.points()[1..]))
        .enumerate()
    {
        let len_err = r.dx.hypot(r.dy) - s.dx.hypot(s.dy);
        let angle = (r.dy.atan2(r.dx) - s.dy.atan2(s.dx)).rem_euclid(std::f64::consts::TAU);
        let angle = angle.min(std::f64::consts::TAU - angle).to_degrees();
        println!(
            "{i:>4} {:>9} {:>6} {len_err:>9.4} {angle:>8.2}°",
            run.primitive, run.count
        );
    }
    println!(
        "bounds: angle <= {:.2}°, length < {}",
        180.0 / orientations as f64,
        config.primitive_length
    );
    Ok(())
}
