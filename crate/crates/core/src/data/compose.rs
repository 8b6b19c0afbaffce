//! Splice a transformed copy of a source region back into its base image.

use ndarray::{s, Array2};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::affine::{apply_affine, Patch};
use crate::data::{BaseImage, ForgerySample, GenMeta};
use crate::error::{Error, Result};

const OFFSET_DRAWS: usize = 200;
const RESEED_ROUNDS: u64 = 5;

fn mask_bbox(mask: &Array2<u8>) -> Option<(usize, usize, usize, usize)> {
    let (h, w) = mask.dim();
    let (mut y0, mut y1, mut x0, mut x1) = (h, 0usize, w, 0usize);
    for ((y, x), &v) in mask.indexed_iter() {
        if v == 1 {
            y0 = y0.min(y);
            y1 = y1.max(y);
            x0 = x0.min(x);
            x1 = x1.max(x);
        }
    }
    (y1 >= y0 && x1 >= x0).then_some((y0, y1, x0, x1))
}

/// Copy the masked source region, transform it, and paste it at a random
/// non-overlapping offset. The returned ternary mask labels source pixels 1
/// and pasted (target) pixels 2.
pub fn compose_forgery(
    base: &BaseImage,
    src_mask: &Array2<u8>,
    scale: f64,
    rotation_deg: f64,
    flip: bool,
    seed: u64,
) -> Result<ForgerySample> {
    let (h, w) = base.size();
    if src_mask.dim() != (h, w) {
        return Err(Error::Shape {
            context: "source mask",
            expected: format!("({h}, {w})"),
            got: format!("{:?}", src_mask.dim()),
        });
    }
    let (y0, y1, x0, x1) = mask_bbox(src_mask).ok_or(Error::Generation {
        seed,
        reason: "source mask is empty".into(),
    })?;
    let patch = Patch {
        pixels: base.pixels.slice(s![y0..=y1, x0..=x1, ..]).to_owned(),
        mask: src_mask.slice(s![y0..=y1, x0..=x1]).to_owned(),
    };
    let moved = apply_affine(&patch, scale, rotation_deg, flip)?;
    let (th, tw) = moved.mask.dim();
    if th > h || tw > w {
        return Err(Error::Generation {
            seed,
            reason: format!("transformed region ({th}x{tw}) exceeds image ({h}x{w})"),
        });
    }

    let offset = (0..=RESEED_ROUNDS)
        .find_map(|round| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + round * 1_000_000);
            (0..OFFSET_DRAWS).find_map(|_| {
                let oy = rng.random_range(0..=h - th);
                let ox = rng.random_range(0..=w - tw);
                let overlaps = moved
                    .mask
                    .indexed_iter()
                    .any(|((my, mx), &v)| v == 1 && src_mask[(oy + my, ox + mx)] == 1);
                (!overlaps).then_some((oy, ox))
            })
        })
        .ok_or(Error::Generation {
            seed,
            reason: "no non-overlapping placement found".into(),
        })?;

    let mut pixels = base.pixels.clone();
    let mut tri_mask = src_mask.clone();
    for ((my, mx), &v) in moved.mask.indexed_iter() {
        if v == 1 {
            let (py, px) = (offset.0 + my, offset.1 + mx);
            tri_mask[(py, px)] = 2;
            for c in 0..3 {
                pixels[(py, px, c)] = moved.pixels[(my, mx, c)];
            }
        }
    }

    Ok(ForgerySample {
        image: pixels,
        tri_mask,
        meta: GenMeta {
            seed,
            scale,
            rotation_deg,
            flip,
            offset,
        },
    })
}

/// Collapse a ternary source/target mask to forged-vs-pristine.
pub fn binary_mask(tri: &Array2<u8>) -> Result<Array2<u8>> {
    if let Some(&bad) = tri.iter().find(|&&v| v > 2) {
        return Err(Error::Dataset {
            sample_id: None,
            reason: format!("mask label {bad} out of range (expected 0, 1, or 2)"),
        });
    }
    Ok(tri.mapv(|v| (v != 0) as u8))
}
