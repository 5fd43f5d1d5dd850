//! Procedural glyph classes: small stroke programs rasterised at 32x32 with
//! per-instance jitter, standing in for a handwritten-character corpus.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::rng::{derive_seed, rng_from};
use crate::tensor::Tensor;

pub const GLYPH_SIZE: usize = 32;

const MAX_ROTATION_RAD: f64 = 10.0 * std::f64::consts::PI / 180.0;
const SCALE_RANGE: (f64, f64) = (0.9, 1.1);
const MAX_TRANSLATION_PX: f64 = 2.0;
const PIXEL_NOISE_STD: f64 = 0.05;

#[derive(Clone, Debug)]
enum Stroke {
    Polyline(Vec<(f64, f64)>),
    Quadratic { p0: (f64, f64), p1: (f64, f64), p2: (f64, f64) },
}

/// A glyph class: a deterministic stroke program in the unit square plus a
/// base stroke width. The same seed always regenerates the same program.
#[derive(Clone, Debug)]
pub struct GlyphClass {
    pub class_seed: u64,
    strokes: Vec<Stroke>,
    base_width: f64,
}

impl GlyphClass {
    pub fn from_seed(class_seed: u64) -> Self {
        let mut rng = rng_from(derive_seed(class_seed, "glyph-program", 0));
        let n_strokes = rng.gen_range(2..=4);
        let mut point = |rng: &mut rand_chacha::ChaCha8Rng| -> (f64, f64) {
            (rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85))
        };
        let strokes = (0..n_strokes)
            .map(|_| {
                if rng.gen_bool(0.5) {
                    let n_points = rng.gen_range(2..=4);
                    Stroke::Polyline((0..n_points).map(|_| point(&mut rng)).collect())
                } else {
                    Stroke::Quadratic {
                        p0: point(&mut rng),
                        p1: point(&mut rng),
                        p2: point(&mut rng),
                    }
                }
            })
            .collect();
        let base_width = rng.gen_range(0.035..0.060);
        GlyphClass { class_seed, strokes, base_width }
    }

    /// Segment soup in unit coordinates; quadratics are flattened.
    fn segments(&self) -> Vec<((f64, f64), (f64, f64))> {
        let mut segs = Vec::new();
        for stroke in &self.strokes {
            match stroke {
                Stroke::Polyline(points) => {
                    for w in points.windows(2) {
                        segs.push((w[0], w[1]));
                    }
                }
                Stroke::Quadratic { p0, p1, p2 } => {
                    const STEPS: usize = 8;
                    let eval = |t: f64| {
                        let u = 1.0 - t;
                        (
                            u * u * p0.0 + 2.0 * u * t * p1.0 + t * t * p2.0,
                            u * u * p0.1 + 2.0 * u * t * p1.1 + t * t * p2.1,
                        )
                    };
                    let mut prev = eval(0.0);
                    for i in 1..=STEPS {
                        let next = eval(i as f64 / STEPS as f64);
                        segs.push((prev, next));
                        prev = next;
                    }
                }
            }
        }
        segs
    }
}

fn dist_point_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Rasterises one instance of a glyph class as a `[1, 32, 32]` image in
/// `[0, 1]`.
///
/// Instance variation: rotation up to 10 degrees, scale in 0.9..1.1,
/// translation up to 2 px, stroke-width jitter, and additive Gaussian pixel
/// noise with std 0.05. A fixed `(class_seed, instance_seed)` pair always
/// produces identical bytes.
pub fn render_glyph(class: &GlyphClass, instance_seed: u64) -> Tensor {
    let mut rng = rng_from(derive_seed(class.class_seed, "glyph-instance", instance_seed));
    let rotation = rng.gen_range(-MAX_ROTATION_RAD..=MAX_ROTATION_RAD);
    let scale = rng.gen_range(SCALE_RANGE.0..=SCALE_RANGE.1);
    let (tx, ty) = (
        rng.gen_range(-MAX_TRANSLATION_PX..=MAX_TRANSLATION_PX),
        rng.gen_range(-MAX_TRANSLATION_PX..=MAX_TRANSLATION_PX),
    );
    let width_jitter = rng.gen_range(0.8..=1.25);
    let (sin, cos) = rotation.sin_cos();
    let size = GLYPH_SIZE as f64;

    let transform = |(x, y): (f64, f64)| -> (f64, f64) {
        let (cx, cy) = ((x - 0.5) * scale, (y - 0.5) * scale);
        let (rx, ry) = (cx * cos - cy * sin, cx * sin + cy * cos);
        ((rx + 0.5) * size + tx, (ry + 0.5) * size + ty)
    };

    let segments: Vec<((f64, f64), (f64, f64))> = class
        .segments()
        .into_iter()
        .map(|(a, b)| (transform(a), transform(b)))
        .collect();
    let width_px = class.base_width * width_jitter * scale * size;

    let mut values = vec![0.0f64; GLYPH_SIZE * GLYPH_SIZE];
    for y in 0..GLYPH_SIZE {
        for x in 0..GLYPH_SIZE {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let mut ink: f64 = 0.0;
            for &(a, b) in &segments {
                let d = dist_point_segment(p, a, b);
                // Solid core of `width_px` with a one-pixel soft edge.
                ink = ink.max((width_px + 1.0 - d).clamp(0.0, 1.0));
            }
            values[y * GLYPH_SIZE + x] = ink;
        }
    }

    let noise = Normal::new(0.0, PIXEL_NOISE_STD).expect("positive std");
    for v in &mut values {
        *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
    }
    Tensor::new(vec![1, GLYPH_SIZE, GLYPH_SIZE], values).expect("fixed extent")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seeds_render_identical_bytes() {
        let class = GlyphClass::from_seed(77);
        let a = render_glyph(&class, 5);
        let b = render_glyph(&GlyphClass::from_seed(77), 5);
        let bits = |t: &Tensor| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn instances_differ_but_share_structure() {
        // The 0.5 bound was fixed after measuring the mean absolute
        // difference over 100 instance pairs (observed maxima stay below 0.2).
        for class_seed in 0..10 {
            let class = GlyphClass::from_seed(class_seed);
            for pair in 0..10 {
                let a = render_glyph(&class, 2 * pair);
                let b = render_glyph(&class, 2 * pair + 1);
                let mad: f64 = a
                    .values()
                    .iter()
                    .zip(b.values())
                    .map(|(x, y)| (x - y).abs())
                    .sum::<f64>()
                    / a.numel() as f64;
                assert!(mad > 0.0, "instances must differ");
                assert!(mad < 0.5, "class {class_seed} pair {pair}: mad {mad}");
            }
        }
    }

    #[test]
    fn pixel_range_is_unit_interval() {
        let class = GlyphClass::from_seed(3);
        let img = render_glyph(&class, 9);
        assert!(img.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
