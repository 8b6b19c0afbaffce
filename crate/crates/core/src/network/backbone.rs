//! Residual CNN backbone: an 18-layer-style residual network truncated after
//! its stride-16 stage, so a (N, 3, S, S) input becomes (N, embed, S/16, S/16).

use ndarray::Array4;

use super::layers::{ConvBn, ConvBnCache, Mode};
use crate::config::NetworkConfig;
use crate::ops::{maxpool3x3s2, maxpool3x3s2_backward, relu, relu_backward, PoolCache};
use crate::params::{Gradients, ParameterSet};

struct Stem {
    conv: ConvBn,
}

struct StemCache {
    conv: ConvBnCache,
    relu_out: Array4<f64>,
    pool: PoolCache,
}

impl Stem {
    fn forward(&self, params: &ParameterSet, x: &Array4<f64>, mode: Mode) -> (Array4<f64>, StemCache) {
        let (a, conv) = self.conv.forward(params, x, mode);
        let relu_out = relu(&a);
        let (y, pool) = maxpool3x3s2(&relu_out);
        (y, StemCache { conv, relu_out, pool })
    }

    fn backward(
        &self,
        params: &ParameterSet,
        cache: &StemCache,
        dy: &Array4<f64>,
        grads: &mut Gradients,
    ) -> Array4<f64> {
        let (_, _, h, w) = cache.relu_out.dim();
        let dr = maxpool3x3s2_backward(dy, &cache.pool, (h, w));
        let da = relu_backward(&dr, &cache.relu_out);
        self.conv.backward(params, &cache.conv, &da, grads)
    }
}

/// Two 3x3 conv+BN layers with a skip connection; the first conv may stride
/// and widen, in which case the skip path gets a 1x1 conv+BN projection.
struct BasicBlock {
    conv1: ConvBn,
    conv2: ConvBn,
    down: Option<ConvBn>,
}

struct BlockCache {
    conv1: ConvBnCache,
    relu1: Array4<f64>,
    conv2: ConvBnCache,
    down: Option<ConvBnCache>,
    out: Array4<f64>,
}

impl BasicBlock {
    fn register(
        params: &mut ParameterSet,
        prefix: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> BasicBlock {
        let conv1 = ConvBn::register(params, &format!("{prefix}.conv1"), cin, cout, 3, stride, 1);
        let conv2 = ConvBn::register(params, &format!("{prefix}.conv2"), cout, cout, 3, 1, 1);
        let down = (stride != 1 || cin != cout)
            .then(|| ConvBn::register(params, &format!("{prefix}.down"), cin, cout, 1, stride, 0));
        BasicBlock { conv1, conv2, down }
    }

    fn forward(&self, params: &ParameterSet, x: &Array4<f64>, mode: Mode) -> (Array4<f64>, BlockCache) {
        let (a, conv1) = self.conv1.forward(params, x, mode);
        let relu1 = relu(&a);
        let (b, conv2) = self.conv2.forward(params, &relu1, mode);
        let (skip, down) = match &self.down {
            Some(d) => {
                let (s, c) = d.forward(params, x, mode);
                (s, Some(c))
            }
            None => (x.clone(), None),
        };
        let out = relu(&(b + skip));
        (
            out.clone(),
            BlockCache {
                conv1,
                relu1,
                conv2,
                down,
                out,
            },
        )
    }

    fn backward(
        &self,
        params: &ParameterSet,
        cache: &BlockCache,
        dy: &Array4<f64>,
        grads: &mut Gradients,
    ) -> Array4<f64> {
        let ds = relu_backward(dy, &cache.out);
        let dr1 = self.conv2.backward(params, &cache.conv2, &ds, grads);
        let da = relu_backward(&dr1, &cache.relu1);
        let dx_main = self.conv1.backward(params, &cache.conv1, &da, grads);
        let dx_skip = match (&self.down, &cache.down) {
            (Some(d), Some(c)) => d.backward(params, c, &ds, grads),
            _ => ds,
        };
        dx_main + dx_skip
    }
}

pub struct Backbone {
    stem: Stem,
    blocks: Vec<BasicBlock>,
    input_size: usize,
}

pub struct BackboneCache {
    stem: StemCache,
    blocks: Vec<BlockCache>,
}

impl Backbone {
    pub fn register(params: &mut ParameterSet, config: &NetworkConfig) -> Backbone {
        let [c1, c2, c3] = config.backbone_channels();
        let stem = Stem {
            conv: ConvBn::register(params, "backbone.stem", 3, c1, 7, 2, 3),
        };
        let mut blocks = Vec::new();
        for (layer, (cin, cout, stride)) in
            [(c1, c1, 1), (c1, c2, 2), (c2, c3, 2)].into_iter().enumerate()
        {
            for b in 0..2 {
                let prefix = format!("backbone.layer{}.block{b}", layer + 1);
                let (bin, bstride) = if b == 0 { (cin, stride) } else { (cout, 1) };
                blocks.push(BasicBlock::register(params, &prefix, bin, cout, bstride));
            }
        }
        Backbone {
            stem,
            blocks,
            input_size: config.input_size,
        }
    }

    /// (N, 3, S, S) -> (N, embed, S/16, S/16)
    pub fn forward(
        &self,
        params: &ParameterSet,
        x: &Array4<f64>,
        mode: Mode,
    ) -> crate::Result<(Array4<f64>, BackboneCache)> {
        let (_, c, h, w) = x.dim();
        if c != 3 || h != self.input_size || w != self.input_size {
            return Err(crate::Error::Shape {
                context: "backbone input".into(),
                expected: format!("(N, 3, {0}, {0})", self.input_size),
                got: format!("{:?}", x.dim()),
            });
        }
        let (mut y, stem) = self.stem.forward(params, x, mode);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (out, cache) = block.forward(params, &y, mode);
            y = out;
            caches.push(cache);
        }
        Ok((y, BackboneCache { stem, blocks: caches }))
    }

    pub fn backward(
        &self,
        params: &ParameterSet,
        cache: &BackboneCache,
        dy: &Array4<f64>,
        grads: &mut Gradients,
    ) -> Array4<f64> {
        let mut d = dy.clone();
        for (block, bcache) in self.blocks.iter().zip(&cache.blocks).rev() {
            d = block.backward(params, bcache, &d, grads);
        }
        self.stem.backward(params, &cache.stem, &d, grads)
    }

    pub fn update_running_stats(
        &self,
        params: &mut ParameterSet,
        cache: &BackboneCache,
        momentum: f64,
    ) {
        self.stem.conv.update_running(params, &cache.stem.conv, momentum);
        for (block, bcache) in self.blocks.iter().zip(&cache.blocks) {
            block.conv1.update_running(params, &bcache.conv1, momentum);
            block.conv2.update_running(params, &bcache.conv2, momentum);
            if let (Some(d), Some(c)) = (&block.down, &bcache.down) {
                d.update_running(params, c, momentum);
            }
        }
    }
}
