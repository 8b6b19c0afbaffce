//! Upsampling decoder: four [3x3 conv + ReLU + 2x bilinear upsample] stages
//! that halve channels and double resolution, then a 1x1 classifier conv.
//! The detection and distinguishment branches are two instances differing
//! only in classifier output channels (2 vs 3).

use ndarray::Array4;

use super::layers::{Conv, ConvCache};
use crate::config::NetworkConfig;
use crate::ops::{conv2d, conv2d_backward, relu, relu_backward, upsample2x, upsample2x_backward};
use crate::params::{Gradients, ParamId, ParameterSet};

pub struct Decoder {
    stages: Vec<Conv>,
    head_w: ParamId,
    num_classes: usize,
}

pub struct DecoderCache {
    stages: Vec<(ConvCache, Array4<f64>)>,
    head_in: Array4<f64>,
}

impl Decoder {
    pub fn register(
        params: &mut ParameterSet,
        config: &NetworkConfig,
        name: &str,
        num_classes: usize,
    ) -> crate::Result<Decoder> {
        if num_classes != 2 && num_classes != 3 {
            return Err(crate::Error::Config(format!(
                "decoder supports 2 or 3 classes, got {num_classes}"
            )));
        }
        let mut cin = config.embed_channels;
        let mut stages = Vec::with_capacity(4);
        for (i, &cout) in config.decoder_channels.iter().enumerate() {
            stages.push(Conv::register(
                params,
                &format!("decoder.{name}.stage{i}.conv"),
                cin,
                cout,
                3,
                1,
                1,
                true,
            ));
            cin = cout;
        }
        let head_w = params.register(
            format!("decoder.{name}.head.weight"),
            &[num_classes, cin, 1, 1],
            true,
            crate::params::Init::HeNormal { fan_in: cin },
        );
        Ok(Decoder {
            stages,
            head_w,
            num_classes,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// (N, embed, s, s) -> (N, num_classes, 16s, 16s) logits.
    pub fn forward(&self, params: &ParameterSet, fm: &Array4<f64>) -> (Array4<f64>, DecoderCache) {
        let mut x = fm.clone();
        let mut caches = Vec::with_capacity(4);
        for stage in &self.stages {
            let (a, cache) = stage.forward(params, &x);
            let r = relu(&a);
            x = upsample2x(&r);
            caches.push((cache, r));
        }
        let logits = conv2d(&x, params.view4(self.head_w), None, 1, 0);
        (
            logits,
            DecoderCache {
                stages: caches,
                head_in: x,
            },
        )
    }

    pub fn backward(
        &self,
        params: &ParameterSet,
        cache: &DecoderCache,
        dy: &Array4<f64>,
        grads: &mut Gradients,
    ) -> Array4<f64> {
        let (mut d, dw_head, _) = conv2d_backward(
            &cache.head_in,
            params.view4(self.head_w),
            dy,
            1,
            0,
            false,
        );
        grads.accum(self.head_w, &dw_head);
        for (stage, (conv_cache, relu_out)) in self.stages.iter().zip(&cache.stages).rev() {
            let dr = upsample2x_backward(&d);
            let da = relu_backward(&dr, relu_out);
            d = stage.backward(params, conv_cache, &da, grads);
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::testsupport::random_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shape_progression_doubles_four_times() {
        let config = NetworkConfig::with_width(64, 32);
        let mut params = ParameterSet::new();
        let dec = Decoder::register(&mut params, &config, "det", 2).unwrap();
        params.initialize(&mut ChaCha8Rng::seed_from_u64(40));
        let fm: Array4<f64> = random_tensor(&[1, 32, 4, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(41))
            .into_dimensionality()
            .unwrap();
        let (y, cache) = dec.forward(&params, &fm);
        assert_eq!(y.dim(), (1, 2, 64, 64));
        // per-stage spatial side: 4 -> (conv keeps) relu -> up 8, 16, 32; head input 64
        let sides: Vec<usize> = cache.stages.iter().map(|(_, r)| r.dim().2).collect();
        assert_eq!(sides, vec![4, 8, 16, 32]);
        assert_eq!(cache.head_in.dim(), (1, 2, 64, 64));
    }

    #[test]
    fn rejects_bad_class_count() {
        let config = NetworkConfig::with_width(64, 32);
        let mut params = ParameterSet::new();
        assert!(Decoder::register(&mut params, &config, "x", 4).is_err());
    }

    #[test]
    fn branch_schemas_differ_in_exactly_one_shape() {
        let config = NetworkConfig::with_width(64, 32);
        let mut pa = ParameterSet::new();
        Decoder::register(&mut pa, &config, "b", 2).unwrap();
        let mut pb = ParameterSet::new();
        Decoder::register(&mut pb, &config, "b", 3).unwrap();
        let (sa, sb) = (pa.schema(), pb.schema());
        assert_eq!(sa.len(), sb.len());
        let differing = sa
            .iter()
            .zip(&sb)
            .filter(|(a, b)| a.shape != b.shape)
            .count();
        assert_eq!(differing, 1);
    }

    #[test]
    fn decoder_finite_difference() {
        let mut config = NetworkConfig::with_width(32, 16);
        config.window = 2;
        let mut params = ParameterSet::new();
        let dec = Decoder::register(&mut params, &config, "det", 2).unwrap();
        params.initialize(&mut ChaCha8Rng::seed_from_u64(42));
        let fm: Array4<f64> = random_tensor(&[1, 16, 2, 2], 1.0, &mut ChaCha8Rng::seed_from_u64(43))
            .into_dimensionality()
            .unwrap();
        let probe: Array4<f64> =
            random_tensor(&[1, 2, 32, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(44))
                .into_dimensionality()
                .unwrap();
        let loss = |p: &ParameterSet, fm: &Array4<f64>| (&dec.forward(p, fm).0 * &probe).sum();

        let (_, cache) = dec.forward(&params, &fm);
        let mut grads = Gradients::zeros_like(&params);
        let dx = dec.backward(&params, &cache, &probe, &mut grads);

        let mut fm_mut = fm.clone();
        for idx in [0usize, 31, 63] {
            let orig = fm_mut.as_slice().unwrap()[idx];
            let step = 1e-5;
            fm_mut.as_slice_mut().unwrap()[idx] = orig + step;
            let plus = loss(&params, &fm_mut);
            fm_mut.as_slice_mut().unwrap()[idx] = orig - step;
            let minus = loss(&params, &fm_mut);
            fm_mut.as_slice_mut().unwrap()[idx] = orig;
            let fd = (plus - minus) / (2.0 * step);
            assert!(
                crate::ops::testsupport::rel_err(fd, dx.as_slice().unwrap()[idx]) < 1e-4,
                "dx[{idx}]"
            );
        }
        let mut p_mut = params.clone();
        for id in 0..p_mut.len() {
            let pid = ParamId(id);
            let idx = p_mut.get(pid).len() / 3;
            let orig = p_mut.get(pid).as_slice().unwrap()[idx];
            let step = 1e-5;
            p_mut.get_mut(pid).as_slice_mut().unwrap()[idx] = orig + step;
            let plus = loss(&p_mut, &fm);
            p_mut.get_mut(pid).as_slice_mut().unwrap()[idx] = orig - step;
            let minus = loss(&p_mut, &fm);
            p_mut.get_mut(pid).as_slice_mut().unwrap()[idx] = orig;
            let fd = (plus - minus) / (2.0 * step);
            let got = grads.get(pid).as_slice().unwrap()[idx];
            if fd.abs() < 1e-9 && got.abs() < 1e-9 {
                continue;
            }
            assert!(
                crate::ops::testsupport::rel_err(fd, got) < 1e-4,
                "param {} [{idx}]: fd {fd} vs {got}",
                p_mut.defs()[id].name
            );
        }
    }
}
