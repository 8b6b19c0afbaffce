//! Batch normalization (NCHW, per-channel) and layer normalization
//! (token sequences, per-position over channels).

use ndarray::{Array1, Array2, Array3, Array4, ArrayView1, Axis};

pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;

pub struct BnCache {
    pub xhat: Array4<f64>,
    pub inv_std: Array1<f64>,
    /// Biased (1/m) batch statistics, exposed so the trainer can update
    /// running estimates after the step.
    pub batch_mean: Array1<f64>,
    pub batch_var: Array1<f64>,
}

/// Training-mode batch norm: normalize with the statistics of this batch
/// over the (N, H, W) axes of each channel.
pub fn batchnorm_train(
    x: &Array4<f64>,
    gamma: ArrayView1<f64>,
    beta: ArrayView1<f64>,
) -> (Array4<f64>, BnCache) {
    let (n, c, h, w) = x.dim();
    let m = (n * h * w) as f64;

    let mut mean = Array1::zeros(c);
    let mut var = Array1::zeros(c);
    for ci in 0..c {
        let slice = x.index_axis(Axis(1), ci);
        let mu = slice.sum() / m;
        mean[ci] = mu;
        var[ci] = slice.fold(0.0, |acc, &v| acc + (v - mu) * (v - mu)) / m;
    }
    let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());

    let mut xhat = x.clone();
    let mut y = Array4::zeros((n, c, h, w));
    for ci in 0..c {
        let (mu, is, g, b) = (mean[ci], inv_std[ci], gamma[ci], beta[ci]);
        let mut xh = xhat.index_axis_mut(Axis(1), ci);
        xh.mapv_inplace(|v| (v - mu) * is);
        y.index_axis_mut(Axis(1), ci).assign(&xh.mapv(|v| g * v + b));
    }
    (
        y,
        BnCache {
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var: var,
        },
    )
}

/// Inference-mode batch norm: normalize with stored running statistics, so
/// each sample's output is independent of the rest of the batch.
pub fn batchnorm_eval(
    x: &Array4<f64>,
    gamma: ArrayView1<f64>,
    beta: ArrayView1<f64>,
    running_mean: ArrayView1<f64>,
    running_var: ArrayView1<f64>,
) -> Array4<f64> {
    let c = x.dim().1;
    let mut y = x.clone();
    for ci in 0..c {
        let is = 1.0 / (running_var[ci] + BN_EPS).sqrt();
        let (mu, g, b) = (running_mean[ci], gamma[ci], beta[ci]);
        y.index_axis_mut(Axis(1), ci)
            .mapv_inplace(|v| g * (v - mu) * is + b);
    }
    y
}

/// Backward pass of training-mode batch norm, including the gradient that
/// flows through the batch statistics.
pub fn batchnorm_backward(
    dy: &Array4<f64>,
    cache: &BnCache,
    gamma: ArrayView1<f64>,
) -> (Array4<f64>, Array1<f64>, Array1<f64>) {
    let (n, c, h, w) = dy.dim();
    let m = (n * h * w) as f64;

    let mut dgamma = Array1::zeros(c);
    let mut dbeta = Array1::zeros(c);
    for ci in 0..c {
        let dy_c = dy.index_axis(Axis(1), ci);
        let xh_c = cache.xhat.index_axis(Axis(1), ci);
        let mut dg = 0.0;
        let mut db = 0.0;
        ndarray::Zip::from(&dy_c).and(&xh_c).for_each(|&d, &xh| {
            dg += d * xh;
            db += d;
        });
        dgamma[ci] = dg;
        dbeta[ci] = db;
    }

    let mut dx = dy.clone();
    for ci in 0..c {
        let scale = gamma[ci] * cache.inv_std[ci];
        let mean_dy = dbeta[ci] / m;
        let mean_dyxh = dgamma[ci] / m;
        let xh_c = cache.xhat.index_axis(Axis(1), ci);
        let mut dx_c = dx.index_axis_mut(Axis(1), ci);
        ndarray::Zip::from(&mut dx_c).and(&xh_c).for_each(|d, &xh| {
            *d = scale * (*d - mean_dy - xh * mean_dyxh);
        });
    }
    (dx, dgamma, dbeta)
}

pub struct LnCache {
    pub xhat: Array3<f64>,
    pub inv_std: Array2<f64>,
}

/// Layer norm over the channel axis of a (N, T, C) token tensor.
pub fn layer_norm(
    x: &Array3<f64>,
    gamma: ArrayView1<f64>,
    beta: ArrayView1<f64>,
) -> (Array3<f64>, LnCache) {
    let (n, t, c) = x.dim();
    let cf = c as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array2::zeros((n, t));
    for ni in 0..n {
        for ti in 0..t {
            let mut row = xhat.index_axis_mut(Axis(0), ni);
            let mut row = row.index_axis_mut(Axis(0), ti);
            let mu = row.sum() / cf;
            let var = row.fold(0.0, |acc, &v| acc + (v - mu) * (v - mu)) / cf;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[(ni, ti)] = is;
            row.mapv_inplace(|v| (v - mu) * is);
        }
    }
    let mut y = xhat.clone();
    for ci in 0..c {
        let (g, b) = (gamma[ci], beta[ci]);
        y.index_axis_mut(Axis(2), ci).mapv_inplace(|v| g * v + b);
    }
    (y, LnCache { xhat, inv_std })
}

pub fn layer_norm_backward(
    dy: &Array3<f64>,
    cache: &LnCache,
    gamma: ArrayView1<f64>,
) -> (Array3<f64>, Array1<f64>, Array1<f64>) {
    let (n, t, c) = dy.dim();
    let cf = c as f64;
    let mut dgamma = Array1::zeros(c);
    let mut dbeta = Array1::zeros(c);
    for ci in 0..c {
        let dy_c = dy.index_axis(Axis(2), ci);
        let xh_c = cache.xhat.index_axis(Axis(2), ci);
        dgamma[ci] = ndarray::Zip::from(&dy_c)
            .and(&xh_c)
            .fold(0.0, |acc, &d, &xh| acc + d * xh);
        dbeta[ci] = dy_c.sum();
    }

    let mut dx = Array3::zeros((n, t, c));
    for ni in 0..n {
        for ti in 0..t {
            let dy_row = dy.slice(ndarray::s![ni, ti, ..]);
            let xh_row = cache.xhat.slice(ndarray::s![ni, ti, ..]);
            let is = cache.inv_std[(ni, ti)];
            // dxhat = dy * gamma; dx = is*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
            let mut mean_dxh = 0.0;
            let mut mean_dxh_xh = 0.0;
            for ci in 0..c {
                let dxh = dy_row[ci] * gamma[ci];
                mean_dxh += dxh;
                mean_dxh_xh += dxh * xh_row[ci];
            }
            mean_dxh /= cf;
            mean_dxh_xh /= cf;
            let mut dx_row = dx.slice_mut(ndarray::s![ni, ti, ..]);
            for ci in 0..c {
                let dxh = dy_row[ci] * gamma[ci];
                dx_row[ci] = is * (dxh - mean_dxh - xh_row[ci] * mean_dxh_xh);
            }
        }
    }
    (dx, dgamma, dbeta)
}
