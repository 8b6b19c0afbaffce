//! Transformer encoder over backbone features: a learned positional
//! embedding, `depth` repeats of (windowed local attention, global
//! attention), then a convolutional refine block with a skip connection.
//!
//! Local attention partitions the feature grid into non-overlapping
//! window x window cells and runs attention within each cell as an
//! independent token sequence, so no information crosses cell boundaries.

use ndarray::{s, Array3, Array4, Axis};

use super::layers::{sum_batch, RefineBlock, RefineCache};
use crate::config::NetworkConfig;
use crate::ops::{
    gelu, gelu_backward, layer_norm, layer_norm_backward, linear, linear_backward, mhsa_backward,
    mhsa_forward, LnCache, MhsaCache,
};
use crate::params::{Gradients, Init, ParamId, ParameterSet};

/// (N, C, H, W) -> (N, H*W, C) in row-major token order.
pub fn fm_to_tokens(x: &Array4<f64>) -> Array3<f64> {
    let (n, c, h, w) = x.dim();
    let permuted = x.view().permuted_axes([0, 2, 3, 1]);
    Array3::from_shape_vec((n, h * w, c), permuted.iter().copied().collect()).unwrap()
}

/// Inverse of [`fm_to_tokens`].
pub fn tokens_to_fm(t: &Array3<f64>, h: usize, w: usize) -> Array4<f64> {
    let (n, tokens, c) = t.dim();
    assert_eq!(tokens, h * w);
    let mut x = Array4::zeros((n, c, h, w));
    for ni in 0..n {
        for yi in 0..h {
            for xi in 0..w {
                let row = t.slice(s![ni, yi * w + xi, ..]);
                x.slice_mut(s![ni, .., yi, xi]).assign(&row);
            }
        }
    }
    x
}

/// Regroup (N, H*W, C) tokens into (N*num_windows, win*win, C) sequences,
/// one per window, in (window-row, window-col) order.
fn window_partition(t: &Array3<f64>, h: usize, w: usize, win: usize) -> Array3<f64> {
    let (n, _, c) = t.dim();
    let (wy, wx) = (h / win, w / win);
    let mut out = Array3::zeros((n * wy * wx, win * win, c));
    for ni in 0..n {
        for gy in 0..wy {
            for gx in 0..wx {
                let seq = ni * wy * wx + gy * wx + gx;
                for iy in 0..win {
                    for ix in 0..win {
                        let src = (gy * win + iy) * w + (gx * win + ix);
                        out.slice_mut(s![seq, iy * win + ix, ..])
                            .assign(&t.slice(s![ni, src, ..]));
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`window_partition`].
fn window_merge(t: &Array3<f64>, n: usize, h: usize, w: usize, win: usize) -> Array3<f64> {
    let c = t.dim().2;
    let (wy, wx) = (h / win, w / win);
    let mut out = Array3::zeros((n, h * w, c));
    for ni in 0..n {
        for gy in 0..wy {
            for gx in 0..wx {
                let seq = ni * wy * wx + gy * wx + gx;
                for iy in 0..win {
                    for ix in 0..win {
                        let dst = (gy * win + iy) * w + (gx * win + ix);
                        out.slice_mut(s![ni, dst, ..])
                            .assign(&t.slice(s![seq, iy * win + ix, ..]));
                    }
                }
            }
        }
    }
    out
}

/// Pre-norm attention block: LN -> MHSA -> residual, LN -> FFN -> residual.
struct AttnBlock {
    norm1_gamma: ParamId,
    norm1_beta: ParamId,
    qkv_w: ParamId,
    qkv_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    norm2_gamma: ParamId,
    norm2_beta: ParamId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
    heads: usize,
}

struct AttnBlockCache {
    ln1: LnCache,
    normed1: Array3<f64>,
    mhsa: MhsaCache,
    ln2: LnCache,
    normed2: Array3<f64>,
    hidden_pre: Array3<f64>,
    hidden_post: Array3<f64>,
}

impl AttnBlock {
    fn register(params: &mut ParameterSet, prefix: &str, c: usize, heads: usize) -> AttnBlock {
        let hidden = 4 * c;
        let attn_bound = 1.0 / (c as f64).sqrt();
        let fc2_bound = 1.0 / (hidden as f64).sqrt();
        AttnBlock {
            norm1_gamma: params.register(format!("{prefix}.norm1.gamma"), &[c], true, Init::Ones),
            norm1_beta: params.register(format!("{prefix}.norm1.beta"), &[c], true, Init::Zeros),
            qkv_w: params.register(
                format!("{prefix}.attn.qkv.weight"),
                &[3 * c, c],
                true,
                Init::Uniform { bound: attn_bound },
            ),
            qkv_b: params.register(format!("{prefix}.attn.qkv.bias"), &[3 * c], true, Init::Zeros),
            out_w: params.register(
                format!("{prefix}.attn.out.weight"),
                &[c, c],
                true,
                Init::Uniform { bound: attn_bound },
            ),
            out_b: params.register(format!("{prefix}.attn.out.bias"), &[c], true, Init::Zeros),
            norm2_gamma: params.register(format!("{prefix}.norm2.gamma"), &[c], true, Init::Ones),
            norm2_beta: params.register(format!("{prefix}.norm2.beta"), &[c], true, Init::Zeros),
            fc1_w: params.register(
                format!("{prefix}.ffn.fc1.weight"),
                &[hidden, c],
                true,
                Init::Uniform { bound: attn_bound },
            ),
            fc1_b: params.register(format!("{prefix}.ffn.fc1.bias"), &[hidden], true, Init::Zeros),
            fc2_w: params.register(
                format!("{prefix}.ffn.fc2.weight"),
                &[c, hidden],
                true,
                Init::Uniform { bound: fc2_bound },
            ),
            fc2_b: params.register(format!("{prefix}.ffn.fc2.bias"), &[c], true, Init::Zeros),
            heads,
        }
    }

    fn forward(&self, params: &ParameterSet, x: &Array3<f64>) -> (Array3<f64>, AttnBlockCache) {
        let (normed1, ln1) = layer_norm(x, params.view1(self.norm1_gamma), params.view1(self.norm1_beta));
        let (attn_out, mhsa) = mhsa_forward(
            &normed1,
            params.view2(self.qkv_w),
            params.view1(self.qkv_b),
            params.view2(self.out_w),
            params.view1(self.out_b),
            self.heads,
        );
        let x2 = x + &attn_out;
        let (normed2, ln2) = layer_norm(
            &x2,
            params.view1(self.norm2_gamma),
            params.view1(self.norm2_beta),
        );
        let hidden_pre = linear(&normed2, params.view2(self.fc1_w), Some(params.view1(self.fc1_b)));
        let hidden_post = gelu(&hidden_pre);
        let ffn_out = linear(
            &hidden_post,
            params.view2(self.fc2_w),
            Some(params.view1(self.fc2_b)),
        );
        let y = &x2 + &ffn_out;
        (
            y,
            AttnBlockCache {
                ln1,
                normed1,
                mhsa,
                ln2,
                normed2,
                hidden_pre,
                hidden_post,
            },
        )
    }

    fn backward(
        &self,
        params: &ParameterSet,
        cache: &AttnBlockCache,
        dy: &Array3<f64>,
        grads: &mut Gradients,
    ) -> Array3<f64> {
        let (dh_post, dw2, db2) =
            linear_backward(&cache.hidden_post, params.view2(self.fc2_w), dy, true);
        grads.accum(self.fc2_w, &dw2);
        grads.accum(self.fc2_b, &db2.unwrap());
        let dh_pre = gelu_backward(&dh_post, &cache.hidden_pre);
        let (dn2, dw1, db1) =
            linear_backward(&cache.normed2, params.view2(self.fc1_w), &dh_pre, true);
        grads.accum(self.fc1_w, &dw1);
        grads.accum(self.fc1_b, &db1.unwrap());
        let (dln2, dg2, dbeta2) =
            layer_norm_backward(&dn2, &cache.ln2, params.view1(self.norm2_gamma));
        grads.accum(self.norm2_gamma, &dg2);
        grads.accum(self.norm2_beta, &dbeta2);
        let dx2 = dy + &dln2;

        let (dn1, dwqkv, dbqkv, dwo, dbo) = mhsa_backward(
            &dx2,
            &cache.normed1,
            params.view2(self.qkv_w),
            params.view2(self.out_w),
            &cache.mhsa,
        );
        grads.accum(self.qkv_w, &dwqkv);
        grads.accum(self.qkv_b, &dbqkv);
        grads.accum(self.out_w, &dwo);
        grads.accum(self.out_b, &dbo);
        let (dln1, dg1, dbeta1) =
            layer_norm_backward(&dn1, &cache.ln1, params.view1(self.norm1_gamma));
        grads.accum(self.norm1_gamma, &dg1);
        grads.accum(self.norm1_beta, &dbeta1);
        &dx2 + &dln1
    }
}

pub struct Encoder {
    pos_embed: Option<ParamId>,
    stages: Vec<(AttnBlock, AttnBlock)>,
    refine: RefineBlock,
    side: usize,
    window: usize,
}

pub struct EncoderCache {
    stages: Vec<(AttnBlockCache, AttnBlockCache)>,
    refine: RefineCache,
}

impl Encoder {
    pub fn register(params: &mut ParameterSet, config: &NetworkConfig) -> Encoder {
        let c = config.embed_channels;
        let side = config.feature_side();
        let depth = if config.use_transformer { config.encoder_depth } else { 0 };
        let pos_embed = (depth > 0).then(|| {
            params.register(
                "encoder.pos_embed",
                &[side * side, c],
                true,
                Init::Normal { std: 0.02 },
            )
        });
        let stages = (0..depth)
            .map(|i| {
                let local = AttnBlock::register(
                    params,
                    &format!("encoder.stage{i}.local"),
                    c,
                    config.num_heads,
                );
                let global = AttnBlock::register(
                    params,
                    &format!("encoder.stage{i}.global"),
                    c,
                    config.num_heads,
                );
                (local, global)
            })
            .collect();
        let refine = RefineBlock::register(params, "encoder.refine", c);
        Encoder {
            pos_embed,
            stages,
            refine,
            side,
            window: config.window,
        }
    }

    pub fn forward(&self, params: &ParameterSet, x: &Array4<f64>) -> (Array4<f64>, EncoderCache) {
        let n = x.dim().0;
        let (side, win) = (self.side, self.window);
        let mut stage_caches = Vec::with_capacity(self.stages.len());

        let refined_input = if self.stages.is_empty() {
            x.clone()
        } else {
            let mut tokens = fm_to_tokens(x);
            if let Some(pe) = self.pos_embed {
                let pe = params.view2(pe);
                tokens += &pe.insert_axis(Axis(0));
            }
            for (local, global) in &self.stages {
                let windows = window_partition(&tokens, side, side, win);
                let (wout, lcache) = local.forward(params, &windows);
                tokens = window_merge(&wout, n, side, side, win);
                let (gout, gcache) = global.forward(params, &tokens);
                tokens = gout;
                stage_caches.push((lcache, gcache));
            }
            tokens_to_fm(&tokens, side, side)
        };

        let (y, refine) = self.refine.forward(params, &refined_input);
        (
            y,
            EncoderCache {
                stages: stage_caches,
                refine,
            },
        )
    }

    pub fn backward(
        &self,
        params: &ParameterSet,
        cache: &EncoderCache,
        dy: &Array4<f64>,
        grads: &mut Gradients,
    ) -> Array4<f64> {
        let d_fm = self.refine.backward(params, &cache.refine, dy, grads);
        if self.stages.is_empty() {
            return d_fm;
        }
        let n = dy.dim().0;
        let (side, win) = (self.side, self.window);
        let mut d_tokens = fm_to_tokens(&d_fm);
        for ((local, global), (lcache, gcache)) in
            self.stages.iter().zip(&cache.stages).rev()
        {
            d_tokens = global.backward(params, gcache, &d_tokens, grads);
            let d_windows = window_partition(&d_tokens, side, side, win);
            let d_wout = local.backward(params, lcache, &d_windows, grads);
            d_tokens = window_merge(&d_wout, n, side, side, win);
        }
        if let Some(pe) = self.pos_embed {
            grads.accum(pe, &sum_batch(&d_tokens));
        }
        tokens_to_fm(&d_tokens, side, side)
    }

    /// Forward through stage `stage`'s windowed local-attention block only.
    pub fn local_attention(
        &self,
        params: &ParameterSet,
        stage: usize,
        fm: &Array4<f64>,
    ) -> Array4<f64> {
        let n = fm.dim().0;
        let tokens = fm_to_tokens(fm);
        let windows = window_partition(&tokens, self.side, self.side, self.window);
        let (out, _) = self.stages[stage].0.forward(params, &windows);
        let merged = window_merge(&out, n, self.side, self.side, self.window);
        tokens_to_fm(&merged, self.side, self.side)
    }

    /// Forward through stage `stage`'s global-attention block only.
    pub fn global_attention(
        &self,
        params: &ParameterSet,
        stage: usize,
        fm: &Array4<f64>,
    ) -> Array4<f64> {
        let tokens = fm_to_tokens(fm);
        let (out, _) = self.stages[stage].1.forward(params, &tokens);
        tokens_to_fm(&out, self.side, self.side)
    }

    /// Forward through the convolutional refine block only.
    pub fn residual_refine(&self, params: &ParameterSet, fm: &Array4<f64>) -> Array4<f64> {
        self.refine.forward(params, fm).0
    }

    /// Attention softmax rows from one stage's local then global pass:
    /// `(local, global)`, each (sequences, heads, tokens, tokens).
    pub fn attention_rows(
        &self,
        params: &ParameterSet,
        stage: usize,
        fm: &Array4<f64>,
    ) -> (Array4<f64>, Array4<f64>) {
        let n = fm.dim().0;
        let tokens = fm_to_tokens(fm);
        let windows = window_partition(&tokens, self.side, self.side, self.window);
        let (wout, lcache) = self.stages[stage].0.forward(params, &windows);
        let merged = window_merge(&wout, n, self.side, self.side, self.window);
        let (_, gcache) = self.stages[stage].1.forward(params, &merged);
        (lcache.mhsa.attn, gcache.mhsa.attn)
    }

    pub fn depth(&self) -> usize {
        self.stages.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::testsupport::random_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config() -> NetworkConfig {
        // 64 input -> 4x4 feature grid; window 2 -> four 2x2 windows.
        let mut c = NetworkConfig::with_width(64, 32);
        c.window = 2;
        c
    }

    fn build(c: &NetworkConfig, seed: u64) -> (Encoder, ParameterSet) {
        let mut params = ParameterSet::new();
        let enc = Encoder::register(&mut params, c);
        params.initialize(&mut ChaCha8Rng::seed_from_u64(seed));
        (enc, params)
    }

    fn random_fm(c: &NetworkConfig, seed: u64) -> Array4<f64> {
        let side = c.feature_side();
        random_tensor(&[1, c.embed_channels, side, side], 3.0, &mut ChaCha8Rng::seed_from_u64(seed))
            .into_dimensionality()
            .unwrap()
    }

    #[test]
    fn token_roundtrip_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let x: Array4<f64> = random_tensor(&[2, 5, 4, 4], 1.0, &mut rng)
            .into_dimensionality()
            .unwrap();
        let t = fm_to_tokens(&x);
        assert_eq!(tokens_to_fm(&t, 4, 4), x);
        let wp = window_partition(&t, 4, 4, 2);
        assert_eq!(window_merge(&wp, 2, 4, 4, 2), t);
    }

    #[test]
    fn local_attention_is_window_independent() {
        let c = config();
        let (enc, params) = build(&c, 21);
        let fm = random_fm(&c, 22);
        let base = enc.local_attention(&params, 0, &fm);

        // Perturb one cell inside window (0,0); windows not containing that
        // cell must be bitwise unchanged.
        let mut fm2 = fm.clone();
        fm2[(0, 3, 1, 1)] += 0.5;
        let out = enc.local_attention(&params, 0, &fm2);
        let win = c.window;
        let mut changed_elsewhere = false;
        for y in 0..4 {
            for x in 0..4 {
                let same_window = y / win == 0 && x / win == 0;
                for ch in 0..c.embed_channels {
                    let (a, b) = (base[(0, ch, y, x)], out[(0, ch, y, x)]);
                    if same_window {
                        continue;
                    }
                    if a.to_bits() != b.to_bits() {
                        changed_elsewhere = true;
                    }
                }
            }
        }
        assert!(!changed_elsewhere, "local attention leaked across windows");
    }

    #[test]
    fn global_attention_has_full_receptive_field() {
        let c = config();
        let (enc, params) = build(&c, 23);
        let fm = random_fm(&c, 24);
        let base = enc.global_attention(&params, 0, &fm);
        let mut fm2 = fm.clone();
        fm2[(0, 0, 2, 3)] += 1.0;
        let out = enc.global_attention(&params, 0, &fm2);
        let mut changed = 0usize;
        let mut total = 0usize;
        for y in 0..4 {
            for x in 0..4 {
                total += 1;
                let moved = (0..c.embed_channels)
                    .any(|ch| (base[(0, ch, y, x)] - out[(0, ch, y, x)]).abs() > 0.0);
                if moved {
                    changed += 1;
                }
            }
        }
        assert!(changed * 100 > total * 99, "{changed}/{total} positions changed");
    }

    #[test]
    fn refine_with_zero_weights_is_identity() {
        let c = config();
        let mut params = ParameterSet::new();
        let enc = Encoder::register(&mut params, &c);
        // leave all params at zero
        let fm = random_fm(&c, 25);
        let out = enc.residual_refine(&params, &fm);
        assert_eq!(out, fm);
    }

    #[test]
    fn depth_zero_equals_transformer_off() {
        let mut c_off = config();
        c_off.use_transformer = false;
        let mut c_zero = config();
        c_zero.encoder_depth = 0;

        let (enc_off, params_off) = build(&c_off, 26);
        let (enc_zero, params_zero) = build(&c_zero, 26);
        assert_eq!(params_off.schema(), params_zero.schema());

        let fm = random_fm(&c_off, 27);
        let (a, _) = enc_off.forward(&params_off, &fm);
        let (b, _) = enc_zero.forward(&params_zero, &fm);
        assert_eq!(a, b);
    }

    #[test]
    fn encoder_output_shape_matches_input() {
        let c = config();
        let (enc, params) = build(&c, 28);
        let fm = random_fm(&c, 29);
        let (y, _) = enc.forward(&params, &fm);
        assert_eq!(y.dim(), fm.dim());
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn encoder_finite_difference() {
        // End-to-end gradient check through pos embed, both attention paths,
        // and the refine block.
        let mut c = NetworkConfig::with_width(32, 16);
        c.window = 2;
        c.num_heads = 4;
        let (enc, params) = build(&c, 30);
        let fm = random_fm(&c, 31);
        let probe: Array4<f64> = random_tensor(
            &[1, c.embed_channels, 2, 2],
            1.0,
            &mut ChaCha8Rng::seed_from_u64(32),
        )
        .into_dimensionality()
        .unwrap();

        let loss = |p: &ParameterSet, fm: &Array4<f64>| (&enc.forward(p, fm).0 * &probe).sum();

        let (_, cache) = enc.forward(&params, &fm);
        let mut grads = Gradients::zeros_like(&params);
        let dx = enc.backward(&params, &cache, &probe, &mut grads);

        // input gradient
        let mut fm_mut = fm.clone();
        for idx in [0usize, 17, 40, 63] {
            let orig = fm_mut.as_slice().unwrap()[idx];
            let step = 1e-5;
            fm_mut.as_slice_mut().unwrap()[idx] = orig + step;
            let plus = loss(&params, &fm_mut);
            fm_mut.as_slice_mut().unwrap()[idx] = orig - step;
            let minus = loss(&params, &fm_mut);
            fm_mut.as_slice_mut().unwrap()[idx] = orig;
            let fd = (plus - minus) / (2.0 * step);
            let got = dx.as_slice().unwrap()[idx];
            assert!(
                crate::ops::testsupport::rel_err(fd, got) < 1e-4,
                "dx[{idx}]: fd {fd} vs {got}"
            );
        }

        // a few parameter gradients across different tensors
        let mut p_mut = params.clone();
        for id in 0..p_mut.len() {
            let pid = crate::params::ParamId(id);
            if !p_mut.defs()[id].learnable || p_mut.get(pid).is_empty() {
                continue;
            }
            let idx = p_mut.get(pid).len() / 2;
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
