//! Synthetic copy-move forgery data: procedural base images, source-region
//! sampling, affine transform + paste composition, and the on-disk dataset
//! format.

mod affine;
mod compose;
mod io;
mod synth;

use ndarray::{Array2, Array3};

pub use affine::{apply_affine, Patch};
pub use compose::{binary_mask, compose_forgery};
pub use io::{
    read_dataset, write_dataset, Dataset, DatasetManifest, LoadedSample, ManifestEntry,
    StoredSample, FORMAT_VERSION,
};
pub use synth::{generate_base_image, sample_source_region};

use crate::error::{Error, Result};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Procedural RGB image, stored interleaved (H, W, 3).
#[derive(Debug, Clone, PartialEq)]
pub struct BaseImage {
    pub pixels: Array3<u8>,
}

impl BaseImage {
    pub fn size(&self) -> (usize, usize) {
        let (h, w, _) = self.pixels.dim();
        (h, w)
    }
}

/// How one forgery sample was produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenMeta {
    pub seed: u64,
    pub scale: f64,
    pub rotation_deg: f64,
    pub flip: bool,
    /// Paste position of the transformed patch (row, col).
    pub offset: (usize, usize),
}

/// One synthesized forgery: image plus tri-class mask
/// (0 = pristine, 1 = source, 2 = target).
#[derive(Debug, Clone)]
pub struct ForgerySample {
    pub image: Array3<u8>,
    pub tri_mask: Array2<u8>,
    pub meta: GenMeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split '{other}' (expected train, val, or test)"
            ))),
        }
    }
}

/// Generate one complete forgery sample. Deterministic in `seed`; the
/// transform parameters are drawn from the seed before composition.
pub fn generate_sample(seed: u64, size: usize) -> Result<ForgerySample> {
    let base = generate_base_image(seed, size);
    let src_mask = sample_source_region(seed ^ 0x5eed_0001, (size, size))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0002);
    let scale = rng.random_range(0.6..1.4);
    let rotation_deg = rng.random_range(0.0..360.0);
    let flip = rng.random_range(0.0..1.0) < 0.5;
    compose_forgery(&base, &src_mask, scale, rotation_deg, flip, seed)
}

/// Generate `count` samples with per-sample seeds `root_seed + i`. The
/// result is identical for any parallel schedule because every sample
/// depends only on its own seed.
pub fn generate_samples(root_seed: u64, count: usize, size: usize) -> Result<Vec<ForgerySample>> {
    use rayon::prelude::*;
    (0..count)
        .into_par_iter()
        .map(|i| generate_sample(root_seed + i as u64, size))
        .collect()
}
