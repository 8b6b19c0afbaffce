//! Bilinear 2x upsampling (half-pixel centers, borders clamped) and its
//! transpose, used by the decoder stages.

use ndarray::{Array4, Zip};

/// Per-axis interpolation table: output index -> (lo, hi, weight of hi).
fn axis_table(n_in: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n_in)
        .map(|o| {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            let floor = src.floor();
            let w = src - floor;
            let lo = floor.max(0.0) as usize;
            let hi = (floor as isize + 1).clamp(0, n_in as isize - 1) as usize;
            let lo = lo.min(n_in - 1);
            (lo, hi, w)
        })
        .collect()
}

pub fn upsample2x(x: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let ty = axis_table(h);
    let tx = axis_table(w);
    let mut y = Array4::zeros((n, c, 2 * h, 2 * w));
    Zip::from(y.outer_iter_mut())
        .and(x.outer_iter())
        .par_for_each(|mut yn, xn| {
            for ci in 0..c {
                let xc = xn.index_axis(ndarray::Axis(0), ci);
                for oy in 0..2 * h {
                    let (y0, y1, wy) = ty[oy];
                    for ox in 0..2 * w {
                        let (x0, x1, wx) = tx[ox];
                        yn[(ci, oy, ox)] = (1.0 - wy) * (1.0 - wx) * xc[(y0, x0)]
                            + (1.0 - wy) * wx * xc[(y0, x1)]
                            + wy * (1.0 - wx) * xc[(y1, x0)]
                            + wy * wx * xc[(y1, x1)];
                    }
                }
            }
        });
    y
}

pub fn upsample2x_backward(dy: &Array4<f64>) -> Array4<f64> {
    let (n, c, ho, wo) = dy.dim();
    let (h, w) = (ho / 2, wo / 2);
    let ty = axis_table(h);
    let tx = axis_table(w);
    let mut dx = Array4::zeros((n, c, h, w));
    Zip::from(dx.outer_iter_mut())
        .and(dy.outer_iter())
        .par_for_each(|mut dxn, dyn_| {
            for ci in 0..c {
                for oy in 0..ho {
                    let (y0, y1, wy) = ty[oy];
                    for ox in 0..wo {
                        let (x0, x1, wx) = tx[ox];
                        let g = dyn_[(ci, oy, ox)];
                        dxn[(ci, y0, x0)] += (1.0 - wy) * (1.0 - wx) * g;
                        dxn[(ci, y0, x1)] += (1.0 - wy) * wx * g;
                        dxn[(ci, y1, x0)] += wy * (1.0 - wx) * g;
                        dxn[(ci, y1, x1)] += wy * wx * g;
                    }
                }
            }
        });
    dx
}
