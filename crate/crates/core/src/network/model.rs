//! Full model: backbone -> encoder -> two decoders over the shared encoding.

use ndarray::{Array3, Array4, Axis};

use super::backbone::{Backbone, BackboneCache};
use super::decoder::{Decoder, DecoderCache};
use super::encoder::{Encoder, EncoderCache};
use super::layers::Mode;
use crate::config::{NetworkConfig, NORM_MEAN, NORM_STD};
use crate::params::{Gradients, ParameterSet};
use crate::Result;

/// Per-image output logits: detection (2 channels) and source/target
/// distinguishment (3 channels), both at input resolution.
pub struct PredictionPair {
    pub det_logits: Array3<f64>,
    pub dist_logits: Array3<f64>,
}

pub struct ModelCache {
    backbone: BackboneCache,
    encoder: EncoderCache,
    det: DecoderCache,
    dist: DecoderCache,
}

pub struct Model {
    pub config: NetworkConfig,
    pub backbone: Backbone,
    pub encoder: Encoder,
    pub det_decoder: Decoder,
    pub dist_decoder: Decoder,
}

impl Model {
    /// Build the model for `config` and register its parameter schema. The
    /// returned parameters are zero-filled; call
    /// [`ParameterSet::initialize`] with a seeded rng before use.
    pub fn new(config: NetworkConfig) -> Result<(Model, ParameterSet)> {
        config.validate()?;
        let mut params = ParameterSet::new();
        let backbone = Backbone::register(&mut params, &config);
        let encoder = Encoder::register(&mut params, &config);
        let det_decoder = Decoder::register(&mut params, &config, "det", 2)?;
        let dist_decoder = Decoder::register(&mut params, &config, "dist", 3)?;
        Ok((
            Model {
                config,
                backbone,
                encoder,
                det_decoder,
                dist_decoder,
            },
            params,
        ))
    }

    /// (N, 3, S, S) normalized input -> detection and distinguishment logits
    /// at (N, 2, S, S) and (N, 3, S, S).
    pub fn forward(
        &self,
        params: &ParameterSet,
        x: &Array4<f64>,
        mode: Mode,
    ) -> Result<(Array4<f64>, Array4<f64>, ModelCache)> {
        let (features, backbone) = self.backbone.forward(params, x, mode)?;
        let (encoded, encoder) = self.encoder.forward(params, &features);
        let (det_logits, det) = self.det_decoder.forward(params, &encoded);
        let (dist_logits, dist) = self.dist_decoder.forward(params, &encoded);
        Ok((
            det_logits,
            dist_logits,
            ModelCache {
                backbone,
                encoder,
                det,
                dist,
            },
        ))
    }

    /// Backpropagate logit gradients into `grads`. Requires a train-mode
    /// cache (batch-norm backward needs batch statistics).
    pub fn backward(
        &self,
        params: &ParameterSet,
        cache: &ModelCache,
        d_det: &Array4<f64>,
        d_dist: &Array4<f64>,
        grads: &mut Gradients,
    ) {
        let d_enc_det = self.det_decoder.backward(params, &cache.det, d_det, grads);
        let d_enc_dist = self
            .dist_decoder
            .backward(params, &cache.dist, d_dist, grads);
        let d_encoded = d_enc_det + d_enc_dist;
        let d_features = self.encoder.backward(params, &cache.encoder, &d_encoded, grads);
        self.backbone.backward(params, &cache.backbone, &d_features, grads);
    }

    /// Fold the batch statistics captured in a train-mode cache into the
    /// running batch-norm estimates.
    pub fn update_running_stats(
        &self,
        params: &mut ParameterSet,
        cache: &ModelCache,
        momentum: f64,
    ) {
        self.backbone
            .update_running_stats(params, &cache.backbone, momentum);
    }

    /// Single-image inference convenience: normalized (3, S, S) image in,
    /// per-image logits out.
    pub fn predict(&self, params: &ParameterSet, image: &Array3<f64>) -> Result<PredictionPair> {
        let x = image.clone().insert_axis(Axis(0));
        let (det, dist, _) = self.forward(params, &x, Mode::Eval)?;
        Ok(PredictionPair {
            det_logits: det.index_axis(Axis(0), 0).to_owned(),
            dist_logits: dist.index_axis(Axis(0), 0).to_owned(),
        })
    }
}

/// Map 8-bit RGB pixel data (H, W, 3) to the network's normalized input
/// layout (3, H, W).
pub fn normalize_image(pixels: &Array3<u8>) -> Array3<f64> {
    let (h, w, c) = pixels.dim();
    assert_eq!(c, 3, "expected interleaved RGB");
    Array3::from_shape_fn((3, h, w), |(ch, y, x)| {
        (pixels[(y, x, ch)] as f64 / 255.0 - NORM_MEAN) / NORM_STD
    })
}

/// Softmax over the channel axis of (N, C, H, W) logits.
pub fn softmax_channels(logits: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = logits.dim();
    let mut out = logits.clone();
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                let mut max = f64::NEG_INFINITY;
                for ch in 0..c {
                    max = max.max(out[(ni, ch, y, x)]);
                }
                let mut sum = 0.0;
                for ch in 0..c {
                    let e = (out[(ni, ch, y, x)] - max).exp();
                    out[(ni, ch, y, x)] = e;
                    sum += e;
                }
                for ch in 0..c {
                    out[(ni, ch, y, x)] /= sum;
                }
            }
        }
    }
    out
}
