//! Batch experiment drivers: the four-arm ablation and the gamma/depth
//! sweeps, each emitting one CSV row per trained arm.

use std::fmt::Write as _;

use crate::config::RunConfig;
use crate::data::LoadedSample;
use crate::error::Result;
use crate::evaluation::{
    detection_summary, distinguishment_summary, evaluate_samples, ClassScores,
};
use crate::network::Model;
use crate::training::{fit, CheckpointRecord};

/// (label, use consistency loss, use transformer) per arm.
pub const ABLATION_ARMS: [(&str, bool, bool); 4] = [
    ("conv_only", false, false),
    ("conv_consistency", true, false),
    ("transformer_only", false, true),
    ("full", true, true),
];

/// One trained arm's test-set scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmResult {
    pub label: String,
    pub config: RunConfig,
    pub epoch: usize,
    pub selection_score: f64,
    pub forged: ClassScores,
    pub source: ClassScores,
    pub target: ClassScores,
    pub pristine: ClassScores,
}

fn evaluate_arm(
    label: String,
    record: &CheckpointRecord,
    test: &[LoadedSample],
) -> Result<ArmResult> {
    let (model, _) = Model::new(record.config.net.clone())?;
    let metrics = evaluate_samples(&model, &record.params, test)?;
    let det = detection_summary(metrics.clone());
    let dist = distinguishment_summary(metrics);
    Ok(ArmResult {
        label,
        config: record.config.clone(),
        epoch: record.epoch,
        selection_score: record.selection_score,
        forged: det.mean,
        source: dist.source,
        target: dist.target,
        pristine: dist.pristine,
    })
}

fn train_and_score(
    label: String,
    config: &RunConfig,
    train: &[LoadedSample],
    val: &[LoadedSample],
    test: &[LoadedSample],
) -> Result<ArmResult> {
    let outcome = fit(config, train, val)?;
    evaluate_arm(label, &outcome.best, test)
}

/// Train the four arms toggling the consistency loss (gamma = 0 disables it)
/// and the transformer encoder; every arm shares the base seed.
pub fn run_ablation(
    base: &RunConfig,
    train: &[LoadedSample],
    val: &[LoadedSample],
    test: &[LoadedSample],
) -> Result<Vec<ArmResult>> {
    ABLATION_ARMS
        .iter()
        .map(|&(label, use_mse, use_transformer)| {
            let mut config = base.clone();
            config.train.gamma = if use_mse { base.train.gamma } else { 0.0 };
            config.net.use_transformer = use_transformer;
            train_and_score(label.to_string(), &config, train, val, test)
        })
        .collect()
}

/// One trained run per consistency weight, same seed throughout.
pub fn run_gamma_sweep(
    values: &[f64],
    base: &RunConfig,
    train: &[LoadedSample],
    val: &[LoadedSample],
    test: &[LoadedSample],
) -> Result<Vec<ArmResult>> {
    values
        .iter()
        .map(|&gamma| {
            let mut config = base.clone();
            config.train.gamma = gamma;
            train_and_score(format!("{gamma}"), &config, train, val, test)
        })
        .collect()
}

/// One trained run per encoder depth, transformer always on, same seed.
pub fn run_depth_sweep(
    values: &[usize],
    base: &RunConfig,
    train: &[LoadedSample],
    val: &[LoadedSample],
    test: &[LoadedSample],
) -> Result<Vec<ArmResult>> {
    values
        .iter()
        .map(|&depth| {
            let mut config = base.clone();
            config.net.use_transformer = true;
            config.net.encoder_depth = depth;
            train_and_score(format!("{depth}"), &config, train, val, test)
        })
        .collect()
}

const METRIC_COLUMNS: &str = "det_forged_precision,det_forged_recall,det_forged_f1,\
dist_source_precision,dist_source_recall,dist_source_f1,\
dist_target_precision,dist_target_recall,dist_target_f1,\
dist_pristine_precision,dist_pristine_recall,dist_pristine_f1";

fn metric_cells(r: &ArmResult) -> String {
    [r.forged, r.source, r.target, r.pristine]
        .iter()
        .map(|s| format!("{},{},{}", s.precision, s.recall, s.f1))
        .collect::<Vec<_>>()
        .join(",")
}

/// One row per ablation arm; floats at full precision so the report parses
/// back to exactly the computed values.
pub fn ablation_csv(arms: &[ArmResult]) -> String {
    let mut out = format!("arm,gamma,use_transformer,selection_score,{METRIC_COLUMNS}\n");
    for r in arms {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.label,
            r.config.train.gamma,
            r.config.net.use_transformer,
            r.selection_score,
            metric_cells(r)
        )
        .expect("writing to a String cannot fail");
    }
    out
}

/// One row per swept value; `axis` names the first column (gamma or depth).
pub fn sweep_csv(axis: &str, arms: &[ArmResult]) -> String {
    let mut out = format!("{axis},selection_score,{METRIC_COLUMNS}\n");
    for r in arms {
        writeln!(out, "{},{},{}", r.label, r.selection_score, metric_cells(r))
            .expect("writing to a String cannot fail");
    }
    out
}
