//! Max pooling with the 3x3/stride-2/pad-1 geometry used by the backbone stem.

use ndarray::{Array4, Zip};

pub struct PoolCache {
    /// Flat (h*W + w) input index of the max for every output cell.
    pub argmax: Array4<usize>,
}

pub fn maxpool3x3s2(x: &Array4<f64>) -> (Array4<f64>, PoolCache) {
    let (n, c, h, w) = x.dim();
    let ho = (h + 2 - 3) / 2 + 1;
    let wo = (w + 2 - 3) / 2 + 1;
    let mut y = Array4::zeros((n, c, ho, wo));
    let mut argmax = Array4::zeros((n, c, ho, wo));

    Zip::from(y.outer_iter_mut())
        .and(argmax.outer_iter_mut())
        .and(x.outer_iter())
        .par_for_each(|mut yn, mut an, xn| {
            for ci in 0..c {
                let xc = xn.index_axis(ndarray::Axis(0), ci);
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let v = xc[(iy as usize, ix as usize)];
                                if v > best {
                                    best = v;
                                    best_idx = iy as usize * w + ix as usize;
                                }
                            }
                        }
                        yn[(ci, oy, ox)] = best;
                        an[(ci, oy, ox)] = best_idx;
                    }
                }
            }
        });
    (y, PoolCache { argmax })
}

pub fn maxpool3x3s2_backward(
    dy: &Array4<f64>,
    cache: &PoolCache,
    input_hw: (usize, usize),
) -> Array4<f64> {
    let (n, c, ho, wo) = dy.dim();
    let (h, w) = input_hw;
    let mut dx = Array4::zeros((n, c, h, w));
    Zip::from(dx.outer_iter_mut())
        .and(dy.outer_iter())
        .and(cache.argmax.outer_iter())
        .par_for_each(|mut dxn, dyn_, an| {
            for ci in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let flat = an[(ci, oy, ox)];
                        dxn[(ci, flat / w, flat % w)] += dyn_[(ci, oy, ox)];
                    }
                }
            }
        });
    dx
}
