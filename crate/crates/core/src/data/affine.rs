//! Affine patch transformation: scale, rotation, horizontal flip.
//!
//! Coordinates treat pixel (row i, col j) as the unit cell [j, j+1) x [i, i+1)
//! with its center at (j+0.5, i+0.5). Masks are resampled nearest-neighbor so
//! labels stay crisp; pixels are resampled bilinearly. Rotations that are
//! exact multiples of 90 degrees use exact matrix entries, so those cases are
//! pure index permutations.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// A rectangular crop of image content with its region-of-interest mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    /// (h, w, 3) interleaved RGB.
    pub pixels: Array3<u8>,
    /// (h, w), 1 inside the region.
    pub mask: Array2<u8>,
}

fn rotation_entries(rotation_deg: f64) -> (f64, f64) {
    if rotation_deg.rem_euclid(90.0) == 0.0 {
        match ((rotation_deg / 90.0).round() as i64).rem_euclid(4) {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        }
    } else {
        rotation_deg.to_radians().sin_cos()
    }
}

/// Transform a patch by (flip, then scale, then rotate) about its center.
/// The output is tight-cropped to the transformed mask's bounding box.
pub fn apply_affine(patch: &Patch, scale: f64, rotation_deg: f64, flip: bool) -> Result<Patch> {
    if !(0.5..=2.0).contains(&scale) {
        return Err(Error::Config(format!(
            "affine scale must be in [0.5, 2.0], got {scale}"
        )));
    }
    if !(0.0..360.0).contains(&rotation_deg) {
        return Err(Error::Config(format!(
            "rotation must be in [0, 360) degrees, got {rotation_deg}"
        )));
    }
    let (h, w) = patch.mask.dim();
    if patch.pixels.dim() != (h, w, 3) {
        return Err(Error::Shape {
            context: "affine patch",
            expected: format!("({h}, {w}, 3)"),
            got: format!("{:?}", patch.pixels.dim()),
        });
    }

    let (sin, cos) = rotation_entries(rotation_deg);
    let fx = if flip { -1.0 } else { 1.0 };
    // forward: p = R * S * F * (q - c); columns of the combined matrix
    let (a00, a01) = (cos * scale * fx, -sin * scale);
    let (a10, a11) = (sin * scale * fx, cos * scale);
    // inverse: q = Ainv * p + c
    let det = a00 * a11 - a01 * a10;
    let (i00, i01) = (a11 / det, -a01 / det);
    let (i10, i11) = (-a10 / det, a00 / det);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);

    // canvas bounds: forward-transform the patch box corners
    let corners = [
        (-cx, -cy),
        (w as f64 - cx, -cy),
        (-cx, h as f64 - cy),
        (w as f64 - cx, h as f64 - cy),
    ];
    let (mut pminx, mut pminy) = (f64::INFINITY, f64::INFINITY);
    let (mut pmaxx, mut pmaxy) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (qx, qy) in corners {
        let px = a00 * qx + a01 * qy;
        let py = a10 * qx + a11 * qy;
        pminx = pminx.min(px);
        pminy = pminy.min(py);
        pmaxx = pmaxx.max(px);
        pmaxy = pmaxy.max(py);
    }
    let cw = (pmaxx - pminx).ceil() as usize;
    let ch = (pmaxy - pminy).ceil() as usize;

    let mut out_mask = Array2::<u8>::zeros((ch, cw));
    let mut out_pixels = Array3::<u8>::zeros((ch, cw, 3));
    let (mut bb_y0, mut bb_y1, mut bb_x0, mut bb_x1) = (ch, 0usize, cw, 0usize);
    for oy in 0..ch {
        for ox in 0..cw {
            let px = pminx + ox as f64 + 0.5;
            let py = pminy + oy as f64 + 0.5;
            let qx = i00 * px + i01 * py + cx;
            let qy = i10 * px + i11 * py + cy;

            // nearest-neighbor mask lookup: the cell containing (qx, qy)
            let (mx, my) = (qx.floor() as isize, qy.floor() as isize);
            if mx < 0 || my < 0 || mx >= w as isize || my >= h as isize {
                continue;
            }
            if patch.mask[(my as usize, mx as usize)] != 1 {
                continue;
            }
            out_mask[(oy, ox)] = 1;
            bb_y0 = bb_y0.min(oy);
            bb_y1 = bb_y1.max(oy);
            bb_x0 = bb_x0.min(ox);
            bb_x1 = bb_x1.max(ox);

            // bilinear pixel sample at the same point
            let (u, v) = (qx - 0.5, qy - 0.5);
            let (x0f, y0f) = (u.floor(), v.floor());
            let (fu, fv) = (u - x0f, v - y0f);
            let clampx = |x: isize| x.clamp(0, w as isize - 1) as usize;
            let clampy = |y: isize| y.clamp(0, h as isize - 1) as usize;
            let (x0, x1) = (clampx(x0f as isize), clampx(x0f as isize + 1));
            let (y0, y1) = (clampy(y0f as isize), clampy(y0f as isize + 1));
            for ch_i in 0..3 {
                let v00 = patch.pixels[(y0, x0, ch_i)] as f64;
                let v01 = patch.pixels[(y0, x1, ch_i)] as f64;
                let v10 = patch.pixels[(y1, x0, ch_i)] as f64;
                let v11 = patch.pixels[(y1, x1, ch_i)] as f64;
                let val = v00 * (1.0 - fv) * (1.0 - fu)
                    + v01 * (1.0 - fv) * fu
                    + v10 * fv * (1.0 - fu)
                    + v11 * fv * fu;
                out_pixels[(oy, ox, ch_i)] = val.round().clamp(0.0, 255.0) as u8;
            }
        }
    }

    if bb_y1 < bb_y0 || bb_x1 < bb_x0 {
        return Err(Error::Config(
            "affine transform produced an empty mask".into(),
        ));
    }
    let mask = out_mask
        .slice(ndarray::s![bb_y0..=bb_y1, bb_x0..=bb_x1])
        .to_owned();
    let pixels = out_pixels
        .slice(ndarray::s![bb_y0..=bb_y1, bb_x0..=bb_x1, ..])
        .to_owned();
    Ok(Patch { pixels, mask })
}
