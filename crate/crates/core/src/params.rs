//! Named-tensor parameter storage.
//!
//! Every learnable weight and every persistent buffer (batch-norm running
//! statistics) lives in a [`ParameterSet`]: a flat, ordered list of named
//! `f64` tensors. The list of (name, shape, learnable) triples — the schema —
//! is a pure function of the network config, so checkpoints can be validated
//! against the config they claim to match.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

/// Index of one tensor inside a [`ParameterSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamDef {
    pub name: String,
    pub shape: Vec<usize>,
    /// Learnable tensors receive gradients and optimizer updates; buffers
    /// (running statistics) are updated out-of-band and never decayed.
    pub learnable: bool,
}

/// How a tensor should be filled when the set is initialized from a seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with std `sqrt(2 / fan_in)`, the usual choice for conv weights
    /// feeding a ReLU.
    HeNormal { fan_in: usize },
    /// Uniform in `[-bound, bound]`, used for attention and feed-forward
    /// projections.
    Uniform { bound: f64 },
    /// Normal with the given std, used for the positional embedding.
    Normal { std: f64 },
}

/// Ordered collection of named tensors plus their init recipes.
#[derive(Debug, Clone)]
pub struct ParameterSet {
    defs: Vec<ParamDef>,
    inits: Vec<Init>,
    values: Vec<ArrayD<f64>>,
}

impl ParameterSet {
    pub fn new() -> Self {
        ParameterSet {
            defs: Vec::new(),
            inits: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Register a tensor and return its id. Registration order defines the
    /// schema, so builders must be deterministic.
    pub fn register(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        learnable: bool,
        init: Init,
    ) -> ParamId {
        let id = ParamId(self.defs.len());
        self.defs.push(ParamDef {
            name: name.into(),
            shape: shape.to_vec(),
            learnable,
        });
        self.inits.push(init);
        self.values.push(ArrayD::zeros(IxDyn(shape)));
        id
    }

    /// Fill every tensor from its init recipe, consuming the rng in
    /// registration order. Identical seeds give identical parameters.
    pub fn initialize(&mut self, rng: &mut impl Rng) {
        for (value, init) in self.values.iter_mut().zip(&self.inits) {
            match *init {
                Init::Zeros => value.fill(0.0),
                Init::Ones => value.fill(1.0),
                Init::HeNormal { fan_in } => {
                    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
                    for v in value.iter_mut() {
                        *v = dist.sample(rng);
                    }
                }
                Init::Uniform { bound } => {
                    let dist = Uniform::new_inclusive(-bound, bound).unwrap();
                    for v in value.iter_mut() {
                        *v = dist.sample(rng);
                    }
                }
                Init::Normal { std } => {
                    let dist = Normal::new(0.0, std).unwrap();
                    for v in value.iter_mut() {
                        *v = dist.sample(rng);
                    }
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.defs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.defs.is_empty()
    }

    pub fn defs(&self) -> &[ParamDef] {
        &self.defs
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[ArrayD<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [ArrayD<f64>] {
        &mut self.values
    }

    pub fn view1(&self, id: ParamId) -> ndarray::ArrayView1<'_, f64> {
        self.values[id.0].view().into_dimensionality().unwrap()
    }

    pub fn view2(&self, id: ParamId) -> ndarray::ArrayView2<'_, f64> {
        self.values[id.0].view().into_dimensionality().unwrap()
    }

    pub fn view4(&self, id: ParamId) -> ndarray::ArrayView4<'_, f64> {
        self.values[id.0].view().into_dimensionality().unwrap()
    }

    /// Total number of scalar entries across learnable tensors.
    pub fn num_learnable_scalars(&self) -> usize {
        self.defs
            .iter()
            .zip(&self.values)
            .filter(|(d, _)| d.learnable)
            .map(|(_, v)| v.len())
            .sum()
    }

    /// The (name, shape, learnable) schema.
    pub fn schema(&self) -> Vec<ParamDef> {
        self.defs.clone()
    }

    /// Check that `other` describes the same schema; used when loading
    /// checkpoints. The first mismatch is reported by name.
    pub fn check_schema(&self, other: &[ParamDef]) -> Result<()> {
        if self.defs.len() != other.len() {
            return Err(Error::Checkpoint(format!(
                "schema mismatch: {} tensors expected, {} found",
                self.defs.len(),
                other.len()
            )));
        }
        for (mine, theirs) in self.defs.iter().zip(other) {
            if mine != theirs {
                return Err(Error::Checkpoint(format!(
                    "schema mismatch at '{}': expected {:?} (learnable={}), found '{}' {:?} (learnable={})",
                    mine.name, mine.shape, mine.learnable, theirs.name, theirs.shape, theirs.learnable
                )));
            }
        }
        Ok(())
    }
}

impl Default for ParameterSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient accumulator aligned index-for-index with a [`ParameterSet`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<ArrayD<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &ParameterSet) -> Self {
        Gradients {
            grads: params
                .values()
                .iter()
                .map(|v| ArrayD::zeros(v.raw_dim()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.grads[id.0]
    }

    pub fn values(&self) -> &[ArrayD<f64>] {
        &self.grads
    }

    pub fn reset(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    /// Accumulate a gradient contribution of any rank into slot `id`.
    pub fn accum<S, D>(&mut self, id: ParamId, delta: &ndarray::ArrayBase<S, D>)
    where
        S: ndarray::Data<Elem = f64>,
        D: ndarray::Dimension,
    {
        self.grads[id.0] += &delta.view().into_dyn();
    }
}
