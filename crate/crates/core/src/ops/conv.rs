//! 2D convolution via im2col + GEMM, with explicit backward.

use ndarray::{s, Array2, Array3, Array4, ArrayView1, ArrayView3, ArrayView4, Axis, Zip};

/// `x` is NCHW, `w` is (C_out, C_in, k_h, k_w), `b` an optional per-output-
/// channel bias. Zero padding, square stride.
pub fn conv2d(
    x: &Array4<f64>,
    w: ArrayView4<f64>,
    b: Option<ArrayView1<f64>>,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (n, cin, h, wd) = x.dim();
    let (cout, cin_w, kh, kw) = w.dim();
    assert_eq!(cin, cin_w, "conv2d channel mismatch");
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let w_mat = w.to_shape((cout, cin * kh * kw)).unwrap();

    let mut out = Array4::zeros((n, cout, ho, wo));
    Zip::from(out.axis_iter_mut(Axis(0)))
        .and(x.axis_iter(Axis(0)))
        .par_for_each(|out_n, x_n| {
            let col = im2col(&x_n, kh, kw, stride, pad, ho, wo);
            let y = w_mat.dot(&col);
            let mut out_mat = out_n.into_shape_with_order((cout, ho * wo)).unwrap();
            out_mat.assign(&y);
        });
    if let Some(b) = b {
        for co in 0..cout {
            out.slice_mut(s![.., co, .., ..]).mapv_inplace(|v| v + b[co]);
        }
    }
    out
}

/// Gradients of [`conv2d`] w.r.t. input, weights, and bias.
///
/// Weight gradients are computed per sample and reduced in batch order, so
/// the result does not depend on the rayon schedule.
pub fn conv2d_backward(
    x: &Array4<f64>,
    w: ArrayView4<f64>,
    dy: &Array4<f64>,
    stride: usize,
    pad: usize,
    with_bias: bool,
) -> (Array4<f64>, Array4<f64>, Option<ndarray::Array1<f64>>) {
    let (n, cin, h, wd) = x.dim();
    let (cout, _, kh, kw) = w.dim();
    let (_, _, ho, wo) = dy.dim();
    let w_mat = w.to_shape((cout, cin * kh * kw)).unwrap();

    let mut dx = Array4::zeros((n, cin, h, wd));
    let mut dw_per_sample = Array3::zeros((n, cout, cin * kh * kw));
    Zip::from(dx.axis_iter_mut(Axis(0)))
        .and(dw_per_sample.axis_iter_mut(Axis(0)))
        .and(x.axis_iter(Axis(0)))
        .and(dy.axis_iter(Axis(0)))
        .par_for_each(|mut dx_n, mut dw_n, x_n, dy_n| {
            let dy_mat = dy_n.to_shape((cout, ho * wo)).unwrap();
            let col = im2col(&x_n, kh, kw, stride, pad, ho, wo);
            dw_n.assign(&dy_mat.dot(&col.t()));
            let dcol = w_mat.t().dot(&dy_mat);
            col2im(&dcol, &mut dx_n, kh, kw, stride, pad, ho, wo);
        });

    let dw_flat = dw_per_sample.sum_axis(Axis(0));
    let dw = dw_flat.into_shape_with_order((cout, cin, kh, kw)).unwrap();
    let db = with_bias.then(|| dy.sum_axis(Axis(0)).sum_axis(Axis(1)).sum_axis(Axis(1)));
    (dx, dw, db)
}

fn im2col(
    x: &ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (cin, h, w) = x.dim();
    let mut col = Array2::zeros((cin * kh * kw, ho * wo));
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let mut col_row = col.row_mut(row);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let x_row = x.slice(s![ci, iy as usize, ..]);
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            col_row[oy * wo + ox] = x_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(
    dcol: &Array2<f64>,
    dx: &mut ndarray::ArrayViewMut3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let (cin, h, w) = dx.dim();
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dcol_row = dcol.row(row);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let mut dx_row = dx.slice_mut(s![ci, iy as usize, ..]);
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx_row[ix as usize] += dcol_row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}
