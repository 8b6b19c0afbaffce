//! Pixel-level scoring: precision/recall/F1 per class, correct-detection
//! counts per attack tag, and prediction-map export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use rayon::prelude::*;

use crate::data::{binary_mask, Dataset, LoadedSample};
use crate::error::{Error, Result};
use crate::network::{normalize_image, Model};
use crate::params::ParameterSet;

/// One-vs-rest pixel counts for a single class on a single image.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    /// False negatives (`fn` is reserved).
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn from_masks(pred: &Array2<u8>, truth: &Array2<u8>, class: u8) -> Result<Self> {
        if pred.dim() != truth.dim() {
            return Err(Error::Shape {
                context: "confusion counts",
                expected: format!("{:?}", truth.dim()),
                got: format!("{:?}", pred.dim()),
            });
        }
        let mut c = ConfusionCounts::default();
        for (&p, &t) in pred.iter().zip(truth.iter()) {
            match (p == class, t == class) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Precision, recall, and F1 with explicit empty-denominator rules: a class
/// that is absent and never predicted scores perfect; otherwise an empty
/// denominator scores zero.
pub fn prf(c: &ConfusionCounts) -> (f64, f64, f64) {
    if c.tp + c.fp + c.fn_ == 0 {
        return (1.0, 1.0, 1.0);
    }
    let p = if c.tp + c.fp == 0 {
        0.0
    } else {
        c.tp as f64 / (c.tp + c.fp) as f64
    };
    let r = if c.tp + c.fn_ == 0 {
        0.0
    } else {
        c.tp as f64 / (c.tp + c.fn_) as f64
    };
    let f1 = if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    };
    (p, r, f1)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ClassScores {
    pub fn from_counts(c: &ConfusionCounts) -> Self {
        let (precision, recall, f1) = prf(c);
        ClassScores {
            precision,
            recall,
            f1,
        }
    }
}

/// Per-image scores: the forged class from the binary head, and the three
/// ternary classes one-vs-rest from the distinguishment head.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMetrics {
    pub sample_id: u64,
    pub attack_tag: String,
    pub forged: ClassScores,
    pub pristine: ClassScores,
    pub source: ClassScores,
    pub target: ClassScores,
}

/// Per-pixel argmax over the channel axis; ties go to the lower class index.
pub fn argmax_mask(logits: &Array3<f64>) -> Array2<u8> {
    let (classes, h, w) = logits.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = 0usize;
        for c in 1..classes {
            if logits[(c, y, x)] > logits[(best, y, x)] {
                best = c;
            }
        }
        best as u8
    })
}

/// Run the model on raw pixels and argmax both heads.
pub fn predict_masks(
    model: &Model,
    params: &ParameterSet,
    pixels: &Array3<u8>,
) -> Result<(Array2<u8>, Array2<u8>)> {
    let input = normalize_image(pixels);
    let pair = model.predict(params, &input)?;
    Ok((
        argmax_mask(&pair.det_logits),
        argmax_mask(&pair.dist_logits),
    ))
}

/// Score one image given its predicted masks and ground-truth ternary mask.
pub fn metrics_from_masks(
    sample_id: u64,
    attack_tag: &str,
    bin_pred: &Array2<u8>,
    tri_pred: &Array2<u8>,
    tri_truth: &Array2<u8>,
) -> Result<ImageMetrics> {
    let bin_truth = binary_mask(tri_truth)?;
    let forged = ClassScores::from_counts(&ConfusionCounts::from_masks(bin_pred, &bin_truth, 1)?);
    let pristine = ClassScores::from_counts(&ConfusionCounts::from_masks(tri_pred, tri_truth, 0)?);
    let source = ClassScores::from_counts(&ConfusionCounts::from_masks(tri_pred, tri_truth, 1)?);
    let target = ClassScores::from_counts(&ConfusionCounts::from_masks(tri_pred, tri_truth, 2)?);
    Ok(ImageMetrics {
        sample_id,
        attack_tag: attack_tag.to_string(),
        forged,
        pristine,
        source,
        target,
    })
}

fn evaluate_sample(model: &Model, params: &ParameterSet, s: &LoadedSample) -> Result<ImageMetrics> {
    let (bin_pred, tri_pred) = predict_masks(model, params, &s.image)?;
    metrics_from_masks(s.id, &s.attack_tag, &bin_pred, &tri_pred, &s.mask)
}

/// Score every image of a dataset, in manifest order.
pub fn evaluate_dataset(
    model: &Model,
    params: &ParameterSet,
    dataset: &Dataset,
) -> Result<Vec<ImageMetrics>> {
    if dataset.is_empty() {
        return Err(Error::Evaluation("dataset is empty".into()));
    }
    (0..dataset.len())
        .into_par_iter()
        .map(|i| evaluate_sample(model, params, &dataset.load(i)?))
        .collect()
}

/// Score a slice of in-memory samples, in slice order.
pub fn evaluate_samples(
    model: &Model,
    params: &ParameterSet,
    samples: &[LoadedSample],
) -> Result<Vec<ImageMetrics>> {
    if samples.is_empty() {
        return Err(Error::Evaluation("sample list is empty".into()));
    }
    samples
        .par_iter()
        .map(|s| evaluate_sample(model, params, s))
        .collect()
}

fn mean_scores(scores: impl Iterator<Item = ClassScores> + ExactSizeIterator) -> ClassScores {
    let n = scores.len() as f64;
    let mut acc = ClassScores::default();
    for s in scores {
        acc.precision += s.precision;
        acc.recall += s.recall;
        acc.f1 += s.f1;
    }
    ClassScores {
        precision: acc.precision / n,
        recall: acc.recall / n,
        f1: acc.f1 / n,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionReport {
    /// Unweighted mean of per-image forged-class scores.
    pub mean: ClassScores,
    pub per_image: Vec<ImageMetrics>,
}

pub fn evaluate_detection(
    model: &Model,
    params: &ParameterSet,
    dataset: &Dataset,
) -> Result<DetectionReport> {
    let per_image = evaluate_dataset(model, params, dataset)?;
    Ok(detection_summary(per_image))
}

pub fn detection_summary(per_image: Vec<ImageMetrics>) -> DetectionReport {
    let mean = mean_scores(per_image.iter().map(|m| m.forged));
    DetectionReport { mean, per_image }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistinguishmentReport {
    pub source: ClassScores,
    pub target: ClassScores,
    pub pristine: ClassScores,
    pub per_image: Vec<ImageMetrics>,
}

pub fn evaluate_distinguishment(
    model: &Model,
    params: &ParameterSet,
    dataset: &Dataset,
) -> Result<DistinguishmentReport> {
    let per_image = evaluate_dataset(model, params, dataset)?;
    Ok(distinguishment_summary(per_image))
}

pub fn distinguishment_summary(per_image: Vec<ImageMetrics>) -> DistinguishmentReport {
    DistinguishmentReport {
        source: mean_scores(per_image.iter().map(|m| m.source)),
        target: mean_scores(per_image.iter().map(|m| m.target)),
        pristine: mean_scores(per_image.iter().map(|m| m.pristine)),
        per_image,
    }
}

/// Per-attack-tag aggregate in the order tags first appear.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryReport {
    pub attack_tag: String,
    pub n_images: usize,
    /// Images whose forged-class F1 strictly exceeds the threshold.
    pub n_correct: usize,
    pub forged: ClassScores,
    pub pristine: ClassScores,
    pub source: ClassScores,
    pub target: ClassScores,
}

pub fn correct_detection_count(per_image: &[ImageMetrics], threshold: f64) -> Vec<CategoryReport> {
    let mut tags: Vec<&str> = Vec::new();
    for m in per_image {
        if !tags.contains(&m.attack_tag.as_str()) {
            tags.push(&m.attack_tag);
        }
    }
    tags.iter()
        .map(|&tag| {
            let group: Vec<&ImageMetrics> =
                per_image.iter().filter(|m| m.attack_tag == tag).collect();
            CategoryReport {
                attack_tag: tag.to_string(),
                n_images: group.len(),
                n_correct: group.iter().filter(|m| m.forged.f1 > threshold).count(),
                forged: mean_scores(group.iter().map(|m| m.forged)),
                pristine: mean_scores(group.iter().map(|m| m.pristine)),
                source: mean_scores(group.iter().map(|m| m.source)),
                target: mean_scores(group.iter().map(|m| m.target)),
            }
        })
        .collect()
}

/// `attack_tag,n_images,n_correct,class,precision,recall,f1` — four class
/// rows per tag.
pub fn category_csv(reports: &[CategoryReport]) -> String {
    let mut out = String::from("attack_tag,n_images,n_correct,class,precision,recall,f1\n");
    for r in reports {
        for (class, s) in [
            ("forged", r.forged),
            ("pristine", r.pristine),
            ("source", r.source),
            ("target", r.target),
        ] {
            writeln!(
                out,
                "{},{},{},{},{:.6},{:.6},{:.6}",
                r.attack_tag, r.n_images, r.n_correct, class, s.precision, s.recall, s.f1
            )
            .expect("writing to a String cannot fail");
        }
    }
    out
}

/// `sample_id,attack_tag,class,precision,recall,f1`, four rows per image.
pub fn image_metrics_csv(per_image: &[ImageMetrics]) -> String {
    let mut out = String::from("sample_id,attack_tag,class,precision,recall,f1\n");
    for m in per_image {
        for (class, s) in [
            ("forged", m.forged),
            ("pristine", m.pristine),
            ("source", m.source),
            ("target", m.target),
        ] {
            writeln!(
                out,
                "{},{},{},{:.6},{:.6},{:.6}",
                m.sample_id, m.attack_tag, class, s.precision, s.recall, s.f1
            )
            .expect("writing to a String cannot fail");
        }
    }
    out
}

/// Render predictions for every sample: `<id>_binary.png` (white = forged)
/// and `<id>_tri.png` (black = pristine, green = source, red = target).
/// Returns the number of files written.
pub fn export_maps(
    model: &Model,
    params: &ParameterSet,
    dataset: &Dataset,
    out_dir: &Path,
) -> Result<usize> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = 0;
    for i in 0..dataset.len() {
        let s = dataset.load(i)?;
        let (bin_pred, tri_pred) = predict_masks(model, params, &s.image)?;
        let (h, w) = bin_pred.dim();

        let bin_img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([bin_pred[(y as usize, x as usize)] * 255])
        });
        let bin_path = out_dir.join(format!("{:06}_binary.png", s.id));
        bin_img
            .save_with_format(&bin_path, image::ImageFormat::Png)
            .map_err(|e| Error::image(&bin_path, e))?;

        let tri_img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            match tri_pred[(y as usize, x as usize)] {
                1 => image::Rgb([0, 255, 0]),
                2 => image::Rgb([255, 0, 0]),
                _ => image::Rgb([0, 0, 0]),
            }
        });
        let tri_path = out_dir.join(format!("{:06}_tri.png", s.id));
        tri_img
            .save_with_format(&tri_path, image::ImageFormat::Png)
            .map_err(|e| Error::image(&tri_path, e))?;
        written += 2;
    }
    Ok(written)
}
