//! Token-sequence ops: linear projection, GELU, and multi-head
//! self-attention with a fused QKV projection.
//!
//! Tokens are (N, T, C) tensors. Attention here is "global": every token
//! attends to every other token in its sequence. Windowed/local attention is
//! built on top of this by reshaping window contents into separate sequences
//! before calling in.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;

/// y[n,t,o] = sum_i x[n,t,i] * w[o,i] + b[o]
pub fn linear(x: &Array3<f64>, w: ArrayView2<f64>, b: Option<ArrayView1<f64>>) -> Array3<f64> {
    let (n, t, c_in) = x.dim();
    let c_out = w.dim().0;
    assert_eq!(w.dim().1, c_in, "linear weight shape");
    let x_mat = x
        .to_shape((n * t, c_in))
        .expect("token tensor is contiguous");
    let mut y_mat = x_mat.dot(&w.t());
    if let Some(b) = b {
        y_mat += &b.broadcast((n * t, c_out)).unwrap();
    }
    y_mat.into_shape_with_order((n, t, c_out)).unwrap()
}

pub fn linear_backward(
    x: &Array3<f64>,
    w: ArrayView2<f64>,
    dy: &Array3<f64>,
    with_bias: bool,
) -> (Array3<f64>, Array2<f64>, Option<Array1<f64>>) {
    let (n, t, c_in) = x.dim();
    let c_out = dy.dim().2;
    let x_mat = x.to_shape((n * t, c_in)).unwrap();
    let dy_mat = dy.to_shape((n * t, c_out)).unwrap();
    let dx = dy_mat
        .dot(&w)
        .into_shape_with_order((n, t, c_in))
        .unwrap();
    let dw = dy_mat.t().dot(&x_mat);
    let db = with_bias.then(|| dy_mat.sum_axis(Axis(0)));
    (dx, dw, db)
}

/// GELU with the tanh approximation.
pub fn gelu(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(gelu_scalar)
}

fn gelu_scalar(x: f64) -> f64 {
    const K: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (K * (x + 0.044715 * x * x * x)).tanh())
}

/// Gradient of [`gelu`] w.r.t. its input (needs the pre-activation input).
pub fn gelu_backward(dy: &Array3<f64>, x: &Array3<f64>) -> Array3<f64> {
    const K: f64 = 0.7978845608028654;
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |d, &v| {
        let u = K * (v + 0.044715 * v * v * v);
        let th = u.tanh();
        let sech2 = 1.0 - th * th;
        *d *= 0.5 * (1.0 + th) + 0.5 * v * sech2 * K * (1.0 + 3.0 * 0.044715 * v * v);
    });
    dx
}

pub struct MhsaCache {
    /// Per-head projections, (N, heads, T, head_dim).
    pub q: Array4<f64>,
    pub k: Array4<f64>,
    pub v: Array4<f64>,
    /// Softmax attention weights, (N, heads, T, T).
    pub attn: Array4<f64>,
    /// Concatenated head outputs before the output projection, (N, T, C).
    pub proj_in: Array3<f64>,
}

/// Multi-head self-attention. `w_qkv` is (3C, C) with query rows first, then
/// key, then value; `w_out` is (C, C). Scores are scaled by 1/sqrt(head_dim).
pub fn mhsa_forward(
    x: &Array3<f64>,
    w_qkv: ArrayView2<f64>,
    b_qkv: ArrayView1<f64>,
    w_out: ArrayView2<f64>,
    b_out: ArrayView1<f64>,
    heads: usize,
) -> (Array3<f64>, MhsaCache) {
    let (n, t, c) = x.dim();
    assert_eq!(w_qkv.dim(), (3 * c, c), "qkv weight shape");
    assert_eq!(c % heads, 0, "channels divisible by heads");
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();

    let per_sample: Vec<_> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let x_n = x.index_axis(Axis(0), ni);
            let mut qkv = x_n.dot(&w_qkv.t()); // (T, 3C)
            qkv += &b_qkv.broadcast((t, 3 * c)).unwrap();

            let mut q = Array3::zeros((heads, t, d));
            let mut k = Array3::zeros((heads, t, d));
            let mut v = Array3::zeros((heads, t, d));
            let mut attn = Array3::zeros((heads, t, t));
            let mut proj_in = Array2::zeros((t, c));
            for h in 0..heads {
                let q_h = qkv.slice(s![.., h * d..(h + 1) * d]);
                let k_h = qkv.slice(s![.., c + h * d..c + (h + 1) * d]);
                let v_h = qkv.slice(s![.., 2 * c + h * d..2 * c + (h + 1) * d]);
                q.index_axis_mut(Axis(0), h).assign(&q_h);
                k.index_axis_mut(Axis(0), h).assign(&k_h);
                v.index_axis_mut(Axis(0), h).assign(&v_h);

                let mut logits = q_h.dot(&k_h.t());
                logits *= scale;
                for mut row in logits.rows_mut() {
                    let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    row.mapv_inplace(|z| (z - max).exp());
                    let sum = row.sum();
                    row.mapv_inplace(|z| z / sum);
                }
                proj_in
                    .slice_mut(s![.., h * d..(h + 1) * d])
                    .assign(&logits.dot(&v_h));
                attn.index_axis_mut(Axis(0), h).assign(&logits);
            }
            let mut y = proj_in.dot(&w_out.t());
            y += &b_out.broadcast((t, c)).unwrap();
            (y, q, k, v, attn, proj_in)
        })
        .collect();

    let mut y = Array3::zeros((n, t, c));
    let mut cache = MhsaCache {
        q: Array4::zeros((n, heads, t, d)),
        k: Array4::zeros((n, heads, t, d)),
        v: Array4::zeros((n, heads, t, d)),
        attn: Array4::zeros((n, heads, t, t)),
        proj_in: Array3::zeros((n, t, c)),
    };
    for (ni, (y_n, q, k, v, attn, proj_in)) in per_sample.into_iter().enumerate() {
        y.index_axis_mut(Axis(0), ni).assign(&y_n);
        cache.q.index_axis_mut(Axis(0), ni).assign(&q);
        cache.k.index_axis_mut(Axis(0), ni).assign(&k);
        cache.v.index_axis_mut(Axis(0), ni).assign(&v);
        cache.attn.index_axis_mut(Axis(0), ni).assign(&attn);
        cache.proj_in.index_axis_mut(Axis(0), ni).assign(&proj_in);
    }
    (y, cache)
}

/// Gradients of [`mhsa_forward`]: (dx, dw_qkv, db_qkv, dw_out, db_out).
pub fn mhsa_backward(
    dy: &Array3<f64>,
    x: &Array3<f64>,
    w_qkv: ArrayView2<f64>,
    w_out: ArrayView2<f64>,
    cache: &MhsaCache,
) -> (Array3<f64>, Array2<f64>, Array1<f64>, Array2<f64>, Array1<f64>) {
    let (n, t, c) = x.dim();
    let heads = cache.q.dim().1;
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();

    let per_sample: Vec<_> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let dy_n = dy.index_axis(Axis(0), ni);
            let x_n = x.index_axis(Axis(0), ni);
            let proj_in_n = cache.proj_in.index_axis(Axis(0), ni);

            let dw_out = dy_n.t().dot(&proj_in_n);
            let db_out = dy_n.sum_axis(Axis(0));
            let d_proj_in = dy_n.dot(&w_out); // (T, C)

            let mut d_qkv = Array2::zeros((t, 3 * c));
            for h in 0..heads {
                let q_h = cache.q.slice(s![ni, h, .., ..]);
                let k_h = cache.k.slice(s![ni, h, .., ..]);
                let v_h = cache.v.slice(s![ni, h, .., ..]);
                let attn_h = cache.attn.slice(s![ni, h, .., ..]);
                let d_out_h = d_proj_in.slice(s![.., h * d..(h + 1) * d]);

                let d_attn = d_out_h.dot(&v_h.t()); // (T, T)
                let dv = attn_h.t().dot(&d_out_h); // (T, D)

                // softmax rows: dz = a * (da - sum_j a_j da_j)
                let mut d_logits = d_attn.clone();
                for (mut dz_row, a_row) in d_logits.rows_mut().into_iter().zip(attn_h.rows()) {
                    let dot = dz_row
                        .iter()
                        .zip(a_row.iter())
                        .map(|(&dz, &a)| dz * a)
                        .sum::<f64>();
                    ndarray::Zip::from(&mut dz_row).and(&a_row).for_each(|dz, &a| {
                        *dz = a * (*dz - dot);
                    });
                }
                d_logits *= scale;

                d_qkv
                    .slice_mut(s![.., h * d..(h + 1) * d])
                    .assign(&d_logits.dot(&k_h));
                d_qkv
                    .slice_mut(s![.., c + h * d..c + (h + 1) * d])
                    .assign(&d_logits.t().dot(&q_h));
                d_qkv
                    .slice_mut(s![.., 2 * c + h * d..2 * c + (h + 1) * d])
                    .assign(&dv);
            }

            let dx = d_qkv.dot(&w_qkv);
            let dw_qkv = d_qkv.t().dot(&x_n);
            let db_qkv = d_qkv.sum_axis(Axis(0));
            (dx, dw_qkv, db_qkv, dw_out, db_out)
        })
        .collect();

    let mut dx = Array3::zeros((n, t, c));
    let mut dw_qkv = Array2::zeros((3 * c, c));
    let mut db_qkv = Array1::zeros(3 * c);
    let mut dw_out = Array2::zeros((c, c));
    let mut db_out = Array1::zeros(c);
    for (ni, (dx_n, dwq, dbq, dwo, dbo)) in per_sample.into_iter().enumerate() {
        dx.index_axis_mut(Axis(0), ni).assign(&dx_n);
        dw_qkv += &dwq;
        db_qkv += &dbq;
        dw_out += &dwo;
        db_out += &dbo;
    }
    (dx, dw_qkv, db_qkv, dw_out, db_out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::testsupport::{central_diff, random_tensor, rel_err};
    use ndarray::ArrayD;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn to3(a: ArrayD<f64>) -> Array3<f64> {
        a.into_dimensionality().unwrap()
    }
    fn to2(a: ArrayD<f64>) -> Array2<f64> {
        a.into_dimensionality().unwrap()
    }
    fn to1(a: ArrayD<f64>) -> Array1<f64> {
        a.into_dimensionality().unwrap()
    }

    #[test]
    fn linear_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = to3(random_tensor(&[2, 3, 4], 1.0, &mut rng));
        let w = to2(random_tensor(&[5, 4], 1.0, &mut rng));
        let b = to1(random_tensor(&[5], 1.0, &mut rng));
        let probe = to3(random_tensor(&[2, 3, 5], 1.0, &mut rng));
        let loss = |x: &Array3<f64>, w: &Array2<f64>, b: &Array1<f64>| {
            (&linear(x, w.view(), Some(b.view())) * &probe).sum()
        };
        let (dx, dw, db) = linear_backward(&x, w.view(), &probe, true);
        let db = db.unwrap();

        let mut xd = x.clone().into_dyn();
        for idx in [0usize, 11, 23] {
            let fd = central_diff(&mut xd, idx, 1e-6, |t| loss(&to3(t.clone()), &w, &b));
            assert!(rel_err(fd, dx.as_slice().unwrap()[idx]) < 1e-7);
        }
        let mut wd = w.clone().into_dyn();
        for idx in [0usize, 7, 19] {
            let fd = central_diff(&mut wd, idx, 1e-6, |t| loss(&x, &to2(t.clone()), &b));
            assert!(rel_err(fd, dw.as_slice().unwrap()[idx]) < 1e-7);
        }
        let mut bd = b.clone().into_dyn();
        for idx in 0..5 {
            let fd = central_diff(&mut bd, idx, 1e-6, |t| loss(&x, &w, &to1(t.clone())));
            assert!(rel_err(fd, db[idx]) < 1e-7);
        }
    }

    #[test]
    fn gelu_matches_reference_points() {
        // Reference values for the tanh approximation.
        let x = Array3::from_shape_vec((1, 1, 3), vec![-1.0, 0.0, 2.0]).unwrap();
        let y = gelu(&x);
        assert!((y[(0, 0, 0)] - (-0.15880800939172324)).abs() < 1e-12);
        assert!(y[(0, 0, 1)].abs() < 1e-15);
        assert!((y[(0, 0, 2)] - 1.9545976940871754).abs() < 1e-12);
    }

    #[test]
    fn gelu_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = to3(random_tensor(&[2, 3, 4], 2.0, &mut rng));
        let probe = to3(random_tensor(&[2, 3, 4], 1.0, &mut rng));
        let dx = gelu_backward(&probe, &x);
        let mut xd = x.clone().into_dyn();
        for idx in 0..24 {
            let fd = central_diff(&mut xd, idx, 1e-6, |t| (&gelu(&to3(t.clone())) * &probe).sum());
            assert!(rel_err(fd, dx.as_slice().unwrap()[idx]) < 1e-6, "dx[{idx}]");
        }
    }

    #[test]
    fn attention_rows_are_convex_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (c, heads) = (8, 2);
        let x = to3(random_tensor(&[2, 5, c], 1.0, &mut rng));
        let w_qkv = to2(random_tensor(&[3 * c, c], 0.5, &mut rng));
        let b_qkv = to1(random_tensor(&[3 * c], 0.5, &mut rng));
        let w_out = to2(random_tensor(&[c, c], 0.5, &mut rng));
        let b_out = to1(random_tensor(&[c], 0.5, &mut rng));
        let (_, cache) = mhsa_forward(&x, w_qkv.view(), b_qkv.view(), w_out.view(), b_out.view(), heads);
        for row in cache.attn.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&a| a >= 0.0));
        }
    }

    #[test]
    fn attention_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, t, c, heads) = (2, 5, 8, 2);
        let x = to3(random_tensor(&[n, t, c], 1.0, &mut rng));
        let w_qkv = to2(random_tensor(&[3 * c, c], 0.5, &mut rng));
        let b_qkv = to1(random_tensor(&[3 * c], 0.5, &mut rng));
        let w_out = to2(random_tensor(&[c, c], 0.5, &mut rng));
        let b_out = to1(random_tensor(&[c], 0.5, &mut rng));
        let probe = to3(random_tensor(&[n, t, c], 1.0, &mut rng));

        let loss = |x: &Array3<f64>,
                    wq: &Array2<f64>,
                    bq: &Array1<f64>,
                    wo: &Array2<f64>,
                    bo: &Array1<f64>| {
            let (y, _) = mhsa_forward(x, wq.view(), bq.view(), wo.view(), bo.view(), heads);
            (&y * &probe).sum()
        };

        let (_, cache) = mhsa_forward(&x, w_qkv.view(), b_qkv.view(), w_out.view(), b_out.view(), heads);
        let (dx, dwq, dbq, dwo, dbo) = mhsa_backward(&probe, &x, w_qkv.view(), w_out.view(), &cache);

        let mut xd = x.clone().into_dyn();
        for idx in [0usize, 13, 41, 79] {
            let fd = central_diff(&mut xd, idx, 1e-6, |v| {
                loss(&to3(v.clone()), &w_qkv, &b_qkv, &w_out, &b_out)
            });
            assert!(rel_err(fd, dx.as_slice().unwrap()[idx]) < 1e-5, "dx[{idx}]");
        }
        let mut wqd = w_qkv.clone().into_dyn();
        for idx in [0usize, 60, 101, 191] {
            let fd = central_diff(&mut wqd, idx, 1e-6, |v| {
                loss(&x, &to2(v.clone()), &b_qkv, &w_out, &b_out)
            });
            assert!(rel_err(fd, dwq.as_slice().unwrap()[idx]) < 1e-5, "dwq[{idx}]");
        }
        // A shared shift on every key moves each softmax row by the same
        // constant, which softmax cancels, so key-bias gradients vanish.
        for idx in c..2 * c {
            assert!(dbq[idx].abs() < 1e-12, "key bias grad should be 0");
        }
        let mut bqd = b_qkv.clone().into_dyn();
        for idx in [0usize, 5, 17, 23] {
            let fd = central_diff(&mut bqd, idx, 1e-6, |v| {
                loss(&x, &w_qkv, &to1(v.clone()), &w_out, &b_out)
            });
            assert!(rel_err(fd, dbq[idx]) < 1e-5, "dbq[{idx}]");
        }
        let mut wod = w_out.clone().into_dyn();
        for idx in [0usize, 31, 63] {
            let fd = central_diff(&mut wod, idx, 1e-6, |v| {
                loss(&x, &w_qkv, &b_qkv, &to2(v.clone()), &b_out)
            });
            assert!(rel_err(fd, dwo.as_slice().unwrap()[idx]) < 1e-5, "dwo[{idx}]");
        }
        let mut bod = b_out.clone().into_dyn();
        for idx in 0..c {
            let fd = central_diff(&mut bod, idx, 1e-6, |v| {
                loss(&x, &w_qkv, &b_qkv, &w_out, &to1(v.clone()))
            });
            assert!(rel_err(fd, dbo[idx]) < 1e-5, "dbo[{idx}]");
        }
    }

    #[test]
    fn attention_is_token_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (c, heads) = (8, 4);
        let x = to3(random_tensor(&[1, 6, c], 1.0, &mut rng));
        let w_qkv = to2(random_tensor(&[3 * c, c], 0.5, &mut rng));
        let b_qkv = to1(random_tensor(&[3 * c], 0.5, &mut rng));
        let w_out = to2(random_tensor(&[c, c], 0.5, &mut rng));
        let b_out = to1(random_tensor(&[c], 0.5, &mut rng));

        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut xp = x.clone();
        for (dst, &src) in perm.iter().enumerate() {
            xp.slice_mut(s![0, dst, ..]).assign(&x.slice(s![0, src, ..]));
        }
        let (y, _) = mhsa_forward(&x, w_qkv.view(), b_qkv.view(), w_out.view(), b_out.view(), heads);
        let (yp, _) = mhsa_forward(&xp, w_qkv.view(), b_qkv.view(), w_out.view(), b_out.view(), heads);
        for (dst, &src) in perm.iter().enumerate() {
            let a = yp.slice(s![0, dst, ..]);
            let b = y.slice(s![0, src, ..]);
            for (u, v) in a.iter().zip(b.iter()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }
}
