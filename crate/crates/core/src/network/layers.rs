//! Conv-based building blocks shared by the backbone, encoder refine block,
//! and decoders. Each layer owns the [`ParamId`]s it registered and exposes
//! forward/backward passes over those parameters.

use ndarray::{Array4, Axis};

use crate::ops::{
    batchnorm_backward, batchnorm_eval, batchnorm_train, conv2d, conv2d_backward, BnCache,
};
use crate::params::{Gradients, Init, ParamId, ParameterSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// 2D convolution with optional bias (no normalization).
pub(crate) struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

pub(crate) struct ConvCache {
    pub x: Array4<f64>,
}

impl Conv {
    pub fn register(
        params: &mut ParameterSet,
        prefix: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Conv {
        let w = params.register(
            format!("{prefix}.weight"),
            &[cout, cin, k, k],
            true,
            Init::HeNormal { fan_in: cin * k * k },
        );
        let b = bias.then(|| params.register(format!("{prefix}.bias"), &[cout], true, Init::Zeros));
        Conv { w, b, stride, pad }
    }

    pub fn forward(&self, params: &ParameterSet, x: &Array4<f64>) -> (Array4<f64>, ConvCache) {
        let y = conv2d(
            x,
            params.view4(self.w),
            self.b.map(|b| params.view1(b)),
            self.stride,
            self.pad,
        );
        (y, ConvCache { x: x.clone() })
    }

    pub fn backward(
        &self,
        params: &ParameterSet,
        cache: &ConvCache,
        dy: &Array4<f64>,
        grads: &mut Gradients,
    ) -> Array4<f64> {
        let (dx, dw, db) = conv2d_backward(
            &cache.x,
            params.view4(self.w),
            dy,
            self.stride,
            self.pad,
            self.b.is_some(),
        );
        grads.accum(self.w, &dw);
        if let (Some(b), Some(db)) = (self.b, db) {
            grads.accum(b, &db);
        }
        dx
    }
}

/// Convolution (bias-free) followed by batch normalization.
pub(crate) struct ConvBn {
    pub w: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stride: usize,
    pub pad: usize,
}

pub(crate) struct ConvBnCache {
    pub x: Array4<f64>,
    /// Present in train mode; eval mode needs no backward state.
    pub bn: Option<BnCache>,
}

impl ConvBn {
    pub fn register(
        params: &mut ParameterSet,
        prefix: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> ConvBn {
        let w = params.register(
            format!("{prefix}.conv.weight"),
            &[cout, cin, k, k],
            true,
            Init::HeNormal { fan_in: cin * k * k },
        );
        let gamma = params.register(format!("{prefix}.bn.gamma"), &[cout], true, Init::Ones);
        let beta = params.register(format!("{prefix}.bn.beta"), &[cout], true, Init::Zeros);
        let running_mean = params.register(
            format!("{prefix}.bn.running_mean"),
            &[cout],
            false,
            Init::Zeros,
        );
        let running_var = params.register(
            format!("{prefix}.bn.running_var"),
            &[cout],
            false,
            Init::Ones,
        );
        ConvBn {
            w,
            gamma,
            beta,
            running_mean,
            running_var,
            stride,
            pad,
        }
    }

    pub fn forward(
        &self,
        params: &ParameterSet,
        x: &Array4<f64>,
        mode: Mode,
    ) -> (Array4<f64>, ConvBnCache) {
        let conv_out = conv2d(x, params.view4(self.w), None, self.stride, self.pad);
        match mode {
            Mode::Train => {
                let (y, bn) =
                    batchnorm_train(&conv_out, params.view1(self.gamma), params.view1(self.beta));
                (
                    y,
                    ConvBnCache {
                        x: x.clone(),
                        bn: Some(bn),
                    },
                )
            }
            Mode::Eval => {
                let y = batchnorm_eval(
                    &conv_out,
                    params.view1(self.gamma),
                    params.view1(self.beta),
                    params.view1(self.running_mean),
                    params.view1(self.running_var),
                );
                (y, ConvBnCache { x: x.clone(), bn: None })
            }
        }
    }

    pub fn backward(
        &self,
        params: &ParameterSet,
        cache: &ConvBnCache,
        dy: &Array4<f64>,
        grads: &mut Gradients,
    ) -> Array4<f64> {
        let bn = cache
            .bn
            .as_ref()
            .expect("backward requires a train-mode forward cache");
        let (d_conv, dgamma, dbeta) = batchnorm_backward(dy, bn, params.view1(self.gamma));
        grads.accum(self.gamma, &dgamma);
        grads.accum(self.beta, &dbeta);
        let (dx, dw, _) = conv2d_backward(
            &cache.x,
            params.view4(self.w),
            &d_conv,
            self.stride,
            self.pad,
            false,
        );
        grads.accum(self.w, &dw);
        dx
    }

    /// Fold this step's batch statistics into the running estimates
    /// (exponential moving average; variance stored unbiased).
    pub fn update_running(&self, params: &mut ParameterSet, cache: &ConvBnCache, momentum: f64) {
        let bn = match &cache.bn {
            Some(bn) => bn,
            None => return,
        };
        let dims = bn.xhat.dim();
        let m = (dims.0 * dims.2 * dims.3) as f64;
        let correction = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        {
            let rm = params.get_mut(self.running_mean);
            let rm = rm.as_slice_mut().unwrap();
            for (r, &b) in rm.iter_mut().zip(bn.batch_mean.iter()) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
        let rv = params.get_mut(self.running_var);
        let rv = rv.as_slice_mut().unwrap();
        for (r, &b) in rv.iter_mut().zip(bn.batch_var.iter()) {
            *r = (1.0 - momentum) * *r + momentum * b * correction;
        }
    }
}

/// Three channel-preserving 3x3 conv+ReLU layers with a skip connection
/// around the whole stack.
pub(crate) struct RefineBlock {
    convs: [Conv; 3],
}

pub(crate) struct RefineCache {
    caches: [ConvCache; 3],
    relus: [Array4<f64>; 3],
}

impl RefineBlock {
    pub fn register(params: &mut ParameterSet, prefix: &str, channels: usize) -> RefineBlock {
        let convs = [0, 1, 2].map(|i| {
            Conv::register(
                params,
                &format!("{prefix}.conv{i}"),
                channels,
                channels,
                3,
                1,
                1,
                true,
            )
        });
        RefineBlock { convs }
    }

    pub fn forward(&self, params: &ParameterSet, x: &Array4<f64>) -> (Array4<f64>, RefineCache) {
        let (a0, c0) = self.convs[0].forward(params, x);
        let r0 = crate::ops::relu(&a0);
        let (a1, c1) = self.convs[1].forward(params, &r0);
        let r1 = crate::ops::relu(&a1);
        let (a2, c2) = self.convs[2].forward(params, &r1);
        let r2 = crate::ops::relu(&a2);
        let y = x + &r2;
        (
            y,
            RefineCache {
                caches: [c0, c1, c2],
                relus: [r0, r1, r2],
            },
        )
    }

    pub fn backward(
        &self,
        params: &ParameterSet,
        cache: &RefineCache,
        dy: &Array4<f64>,
        grads: &mut Gradients,
    ) -> Array4<f64> {
        let d2 = crate::ops::relu_backward(dy, &cache.relus[2]);
        let dr1 = self.convs[2].backward(params, &cache.caches[2], &d2, grads);
        let d1 = crate::ops::relu_backward(&dr1, &cache.relus[1]);
        let dr0 = self.convs[1].backward(params, &cache.caches[1], &d1, grads);
        let d0 = crate::ops::relu_backward(&dr0, &cache.relus[0]);
        let dx_chain = self.convs[0].backward(params, &cache.caches[0], &d0, grads);
        dy + &dx_chain
    }
}

/// Sum gradients over the batch axis of a (N, T, C) tensor, in index order.
pub(crate) fn sum_batch(d: &ndarray::Array3<f64>) -> ndarray::Array2<f64> {
    d.sum_axis(Axis(0))
}
