//! Photometric and compression attacks for robustness evaluation.
//!
//! All attacks are geometry-preserving, so ground-truth masks stay valid
//! unmodified. Every transform is deterministic in (image, spec, seed); the
//! seed is consumed only by noise adding.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::data::{read_dataset, write_dataset, Dataset, DatasetManifest, StoredSample};
use crate::error::{Error, Result};

/// Severity tables, one row per level.
const BC_FACTORS: [f64; 3] = [0.95, 0.90, 0.80];
const CA_FACTORS: [f64; 3] = [0.95, 0.90, 0.80];
const CR_LEVELS: [u32; 3] = [128, 64, 32];
const IB_KERNELS: [usize; 3] = [3, 5, 7];
const NA_SIGMAS: [f64; 3] = [2.0, 5.0, 10.0];
const JC_QUALITIES: [u8; 9] = [20, 30, 40, 50, 60, 70, 80, 90, 100];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttackCategory {
    /// No attack.
    Base,
    /// Brightness change: intensity range compressed toward black.
    Bc,
    /// Contrast adjustment: midpoint-anchored scaling.
    Ca,
    /// Color reduction: uniform per-channel quantization.
    Cr,
    /// Image blurring: mean filter with edge replication.
    Ib,
    /// Noise adding: zero-mean Gaussian, clamped.
    Na,
    /// JPEG compression: encode/decode round trip, 4:2:0 subsampling.
    Jc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AttackSpec {
    pub category: AttackCategory,
    pub level: u8,
}

impl AttackSpec {
    pub const BASE: AttackSpec = AttackSpec {
        category: AttackCategory::Base,
        level: 0,
    };

    pub fn new(category: AttackCategory, level: u8) -> Result<Self> {
        let ok = match category {
            AttackCategory::Base => level == 0,
            AttackCategory::Jc => (1..=9).contains(&level),
            _ => (1..=3).contains(&level),
        };
        if !ok {
            return Err(Error::AttackSpec {
                spec: format!("{category:?}{level}"),
            });
        }
        Ok(AttackSpec { category, level })
    }

    /// Every supported spec: BASE, 3 levels each of BC/CA/CR/IB/NA, 9 of JC.
    pub fn all() -> Vec<AttackSpec> {
        let mut specs = vec![AttackSpec::BASE];
        for cat in [
            AttackCategory::Bc,
            AttackCategory::Ca,
            AttackCategory::Cr,
            AttackCategory::Ib,
            AttackCategory::Na,
        ] {
            for level in 1..=3 {
                specs.push(AttackSpec { category: cat, level });
            }
        }
        for level in 1..=9 {
            specs.push(AttackSpec {
                category: AttackCategory::Jc,
                level,
            });
        }
        specs
    }
}

impl fmt::Display for AttackSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.category {
            AttackCategory::Base => write!(f, "BASE"),
            AttackCategory::Bc => write!(f, "BC{}", self.level),
            AttackCategory::Ca => write!(f, "CA{}", self.level),
            AttackCategory::Cr => write!(f, "CR{}", self.level),
            AttackCategory::Ib => write!(f, "IB{}", self.level),
            AttackCategory::Na => write!(f, "NA{}", self.level),
            AttackCategory::Jc => write!(f, "JC{}", self.level),
        }
    }
}

impl FromStr for AttackSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "BASE" {
            return Ok(AttackSpec::BASE);
        }
        let err = || Error::AttackSpec { spec: s.to_string() };
        if s.len() < 3 {
            return Err(err());
        }
        let (tag, digits) = s.split_at(2);
        let category = match tag {
            "BC" => AttackCategory::Bc,
            "CA" => AttackCategory::Ca,
            "CR" => AttackCategory::Cr,
            "IB" => AttackCategory::Ib,
            "NA" => AttackCategory::Na,
            "JC" => AttackCategory::Jc,
            _ => return Err(err()),
        };
        let level: u8 = digits.parse().map_err(|_| err())?;
        AttackSpec::new(category, level).map_err(|_| err())
    }
}

fn remap(image: &Array3<u8>, f: impl Fn(f64) -> f64) -> Array3<u8> {
    image.mapv(|v| f(v as f64).round().clamp(0.0, 255.0) as u8)
}

fn mean_filter(image: &Array3<u8>, k: usize) -> Array3<u8> {
    let (h, w, _) = image.dim();
    let r = (k / 2) as isize;
    let norm = (k * k) as f64;
    Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        let mut acc = 0.0;
        for dy in -r..=r {
            for dx in -r..=r {
                let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                acc += image[(sy, sx, c)] as f64;
            }
        }
        (acc / norm).round().clamp(0.0, 255.0) as u8
    })
}

fn add_noise(image: &Array3<u8>, sigma: f64, seed: u64) -> Array3<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("sigma is positive");
    let mut out = image.clone();
    // fixed row-major draw order makes the output a pure function of the seed
    for v in out.iter_mut() {
        let noisy = *v as f64 + normal.sample(&mut rng);
        *v = noisy.round().clamp(0.0, 255.0) as u8;
    }
    out
}

fn jpeg_round_trip(image: &Array3<u8>, quality: u8) -> Result<Array3<u8>> {
    let (h, w, _) = image.dim();
    let data: Vec<u8> = image.as_standard_layout().iter().copied().collect();
    let mut buf = Vec::new();
    let mut encoder = jpeg_encoder::Encoder::new(&mut buf, quality);
    encoder.set_sampling_factor(jpeg_encoder::SamplingFactor::F_2_2);
    encoder.encode(&data, w as u16, h as u16, jpeg_encoder::ColorType::Rgb)?;

    let decoded = image::load_from_memory_with_format(&buf, image::ImageFormat::Jpeg)
        .map_err(Error::JpegDecode)?
        .into_rgb8();
    let (dw, dh) = decoded.dimensions();
    if (dh as usize, dw as usize) != (h, w) {
        return Err(Error::Evaluation(format!(
            "jpeg round trip changed size: {h}x{w} -> {dh}x{dw}"
        )));
    }
    Ok(Array3::from_shape_vec((h, w, 3), decoded.into_raw())
        .expect("raster buffer length matches dimensions"))
}

/// Apply one attack. The seed is used only by noise adding.
pub fn apply_attack(image: &Array3<u8>, spec: AttackSpec, seed: u64) -> Result<Array3<u8>> {
    // reject stale hand-built specs that bypassed the constructor
    AttackSpec::new(spec.category, spec.level)?;
    let lvl = spec.level.saturating_sub(1) as usize;
    Ok(match spec.category {
        AttackCategory::Base => image.clone(),
        AttackCategory::Bc => {
            let u = BC_FACTORS[lvl];
            remap(image, |v| v * u)
        }
        AttackCategory::Ca => {
            let f = CA_FACTORS[lvl];
            remap(image, |v| 127.5 + (v - 127.5) * f)
        }
        AttackCategory::Cr => {
            let step = 256 / CR_LEVELS[lvl];
            image.mapv(|v| {
                let bin = v as u32 / step;
                (bin * step + step / 2) as u8
            })
        }
        AttackCategory::Ib => mean_filter(image, IB_KERNELS[lvl]),
        AttackCategory::Na => add_noise(image, NA_SIGMAS[lvl], seed),
        AttackCategory::Jc => jpeg_round_trip(image, JC_QUALITIES[lvl])?,
    })
}

/// Attack every image of a dataset, leaving masks untouched, and write the
/// result under `out_root` tagged with the spec. Sample i uses seed
/// `root_seed + id`.
pub fn attack_dataset(
    dataset: &Dataset,
    spec: AttackSpec,
    out_root: &Path,
    root_seed: u64,
) -> Result<DatasetManifest> {
    let attacked: Vec<StoredSample> = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let s = dataset.load(i)?;
            let image = apply_attack(&s.image, spec, root_seed + s.id)?;
            Ok(StoredSample {
                id: s.id,
                image,
                mask: s.mask,
                attack_tag: spec.to_string(),
            })
        })
        .collect::<Result<_>>()?;
    write_dataset(
        out_root,
        dataset.manifest.split,
        dataset.manifest.seed,
        &attacked,
    )
}

/// Convenience wrapper: open, attack, write.
pub fn attack_dataset_at(
    in_root: &Path,
    spec: AttackSpec,
    out_root: &Path,
    root_seed: u64,
) -> Result<DatasetManifest> {
    let ds = read_dataset(in_root)?;
    attack_dataset(&ds, spec, out_root, root_seed)
}
