//! Low-level differentiable operations.
//!
//! Every op is a pure function: forward passes return the output (plus a
//! cache of whatever the backward pass needs), backward passes map an
//! upstream gradient to input/parameter gradients. Nothing here mutates
//! shared state, which keeps training steps deterministic and lets the test
//! suite check each op against central finite differences in isolation.
//!
//! Batch parallelism: ops parallelize over the batch axis only, with each
//! rayon task writing a disjoint slice, and reduce per-sample partials in
//! index order. Results are therefore independent of thread schedule.

mod attention;
mod conv;
mod norm;
mod pool;
mod resample;

pub use attention::{
    gelu, gelu_backward, linear, linear_backward, mhsa_backward, mhsa_forward, MhsaCache,
};
pub use conv::{conv2d, conv2d_backward};
pub use norm::{
    batchnorm_backward, batchnorm_eval, batchnorm_train, layer_norm, layer_norm_backward, BnCache,
    LnCache, BN_EPS, LN_EPS,
};
pub use pool::{maxpool3x3s2, maxpool3x3s2_backward, PoolCache};
pub use resample::{upsample2x, upsample2x_backward};

use ndarray::Array4;

/// Elementwise ReLU.
pub fn relu(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient of [`relu`] given the forward output (positive output marks the
/// pass-through entries; the subgradient at exactly zero is taken as zero).
pub fn relu_backward(dy: &Array4<f64>, y: &Array4<f64>) -> Array4<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &o| {
        if o <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

#[cfg(test)]
pub(crate) mod testsupport {
    use ndarray::{ArrayD, IxDyn};
    use rand::RngExt;
    use rand_chacha::ChaCha8Rng;

    /// Fill an arbitrary-rank tensor with uniform values in [-scale, scale].
    pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-scale..scale))
    }

    /// Central finite difference of `f` w.r.t. one entry of `x`.
    pub fn central_diff(x: &mut ArrayD<f64>, idx: usize, step: f64, mut f: impl FnMut(&ArrayD<f64>) -> f64) -> f64 {
        let orig = x.as_slice().unwrap()[idx];
        x.as_slice_mut().unwrap()[idx] = orig + step;
        let plus = f(x);
        x.as_slice_mut().unwrap()[idx] = orig - step;
        let minus = f(x);
        x.as_slice_mut().unwrap()[idx] = orig;
        (plus - minus) / (2.0 * step)
    }

    /// Relative error with an absolute floor, for finite-difference asserts.
    pub fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }
}
