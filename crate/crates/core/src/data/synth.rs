//! Procedural base images and source-region masks.

use ndarray::{Array2, Array3};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::BaseImage;
use crate::error::{Error, Result};

/// Deterministic textured image: a directional gradient base, a radial
/// gradient layer, several semi-transparent filled shapes at mixed scales,
/// and low-amplitude per-pixel noise.
pub fn generate_base_image(seed: u64, size: usize) -> BaseImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let mut canvas = Array3::<f64>::zeros((size, size, 3));

    // directional gradient between two random colors
    let c0: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..256.0));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..256.0));
    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = phi.sin_cos();
    for y in 0..size {
        for x in 0..size {
            let t = ((x as f64 * dx + y as f64 * dy) / (s * std::f64::consts::SQRT_2) + 0.5)
                .clamp(0.0, 1.0);
            for ch in 0..3 {
                canvas[(y, x, ch)] = c0[ch] + (c1[ch] - c0[ch]) * t;
            }
        }
    }

    // radial gradient layer
    let (rcy, rcx) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
    let rr: f64 = rng.random_range(0.4 * s..1.2 * s);
    let c2: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..256.0));
    let rw: f64 = rng.random_range(0.25..0.55);
    for y in 0..size {
        for x in 0..size {
            let d = ((y as f64 - rcy).powi(2) + (x as f64 - rcx).powi(2)).sqrt();
            let t = (1.0 - d / rr).clamp(0.0, 1.0) * rw;
            for ch in 0..3 {
                canvas[(y, x, ch)] = canvas[(y, x, ch)] * (1.0 - t) + c2[ch] * t;
            }
        }
    }

    // filled shapes, larger ones first so small details survive
    let shapes = rng.random_range(3..=8);
    for i in 0..shapes {
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..256.0));
        let alpha: f64 = rng.random_range(0.5..1.0);
        let frac = 1.0 - i as f64 / shapes as f64; // shrink over the sequence
        let radius = rng.random_range(0.06 * s..0.20 * s) * (0.5 + frac);
        let (cy, cx) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let kind = rng.random_range(0..3u8);
        let ang: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        for y in 0..size {
            for x in 0..size {
                let (fy, fx) = (y as f64 - cy, x as f64 - cx);
                let inside = match kind {
                    0 => fy * fy + fx * fx <= radius * radius,
                    1 => fy.abs() <= radius && fx.abs() <= radius * 0.7,
                    _ => {
                        // half-plane wedge: two rotated cuts make a triangle-ish sector
                        let r = (fy * fy + fx * fx).sqrt();
                        let a = fy.atan2(fx);
                        r <= radius * 1.2 && ((a - ang).rem_euclid(std::f64::consts::TAU)) < 1.2
                    }
                };
                if inside {
                    for ch in 0..3 {
                        canvas[(y, x, ch)] = canvas[(y, x, ch)] * (1.0 - alpha) + color[ch] * alpha;
                    }
                }
            }
        }
    }

    // low-amplitude noise
    let amp: f64 = rng.random_range(2.0..5.0);
    let mut pixels = Array3::<u8>::zeros((size, size, 3));
    for y in 0..size {
        for x in 0..size {
            for ch in 0..3 {
                let v = canvas[(y, x, ch)] + rng.random_range(-amp..amp);
                pixels[(y, x, ch)] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    BaseImage { pixels }
}

/// Sample a single connected blob whose area is within [2%, 15%] of the
/// image. The blob is a star-shaped polygon: random per-vertex radii
/// interpolated over angle, so every boundary ray from the center crosses
/// exactly once and the rasterization stays connected.
pub fn sample_source_region(seed: u64, size: (usize, usize)) -> Result<Array2<u8>> {
    let (h, w) = size;
    if h < 64 || w < 64 {
        return Err(Error::Config(format!(
            "source region sampling requires at least 64x64, got {h}x{w}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = (h * w) as f64;
    let (lo, hi) = (0.02 * total, 0.15 * total);

    for _ in 0..100 {
        let target_frac: f64 = rng.random_range(0.025..0.10);
        let mean_radius = (target_frac * total / std::f64::consts::PI).sqrt();
        let verts = rng.random_range(8..=14usize);
        let radii: Vec<f64> = (0..verts)
            .map(|_| mean_radius * rng.random_range(0.65..1.30))
            .collect();
        let max_r = radii.iter().cloned().fold(0.0, f64::max);
        let margin = (max_r + 2.0).min(h.min(w) as f64 / 2.0 - 2.0);
        let cy: f64 = rng.random_range(margin..h as f64 - margin);
        let cx: f64 = rng.random_range(margin..w as f64 - margin);

        let mut mask = Array2::<u8>::zeros((h, w));
        let mut area = 0usize;
        let span = 2.0 * std::f64::consts::PI / verts as f64;
        let y0 = ((cy - max_r).floor() as isize).max(0) as usize;
        let y1 = ((cy + max_r).ceil() as isize).min(h as isize - 1) as usize;
        let x0 = ((cx - max_r).floor() as isize).max(0) as usize;
        let x1 = ((cx + max_r).ceil() as isize).min(w as isize - 1) as usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (fy, fx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let dist = (fy * fy + fx * fx).sqrt();
                let ang = fy.atan2(fx).rem_euclid(2.0 * std::f64::consts::PI);
                let k = (ang / span) as usize % verts;
                let t = (ang - k as f64 * span) / span;
                let r = radii[k] * (1.0 - t) + radii[(k + 1) % verts] * t;
                if dist <= r {
                    mask[(y, x)] = 1;
                    area += 1;
                }
            }
        }
        if area as f64 >= lo && area as f64 <= hi {
            return Ok(mask);
        }
    }
    Err(Error::Generation {
        seed,
        reason: "no source region within area bounds after 100 draws".into(),
    })
}
