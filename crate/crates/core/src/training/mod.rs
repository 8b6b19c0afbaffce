//! Optimization loop: Adam with polynomial learning-rate decay, per-epoch
//! validation, and best-mean-F1 checkpoint selection.

mod checkpoint;
mod drivers;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointRecord, CHECKPOINT_VERSION};
pub use drivers::{
    ablation_csv, run_ablation, run_depth_sweep, run_gamma_sweep, sweep_csv, ArmResult,
    ABLATION_ARMS,
};

use ndarray::{Array3, Array4, Zip};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, TrainConfig};
use crate::data::{binary_mask, LoadedSample};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_samples, ImageMetrics};
use crate::network::{normalize_image, Model};
use crate::objective::{batch_objective, LossBreakdown};
use crate::params::{Gradients, ParameterSet};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Momentum folding batch statistics into the running batch-norm estimates.
pub const BN_MOMENTUM: f64 = 0.1;

/// Polynomial decay: `lr0 * (1 - iter/maxiter)^power`, applied before every
/// optimizer step.
pub fn poly_lr(iter: u64, maxiter: u64, lr0: f64, power: f64) -> Result<f64> {
    if maxiter == 0 || iter > maxiter {
        return Err(Error::Schedule { iter, maxiter });
    }
    Ok(lr0 * (1.0 - iter as f64 / maxiter as f64).powf(power))
}

/// Adam first/second moment estimates, index-aligned with a [`ParameterSet`].
/// Slots for non-learnable buffers exist but are never touched.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub t: u64,
    m: Vec<ndarray::ArrayD<f64>>,
    v: Vec<ndarray::ArrayD<f64>>,
}

impl AdamState {
    pub fn new(params: &ParameterSet) -> Self {
        AdamState {
            t: 0,
            m: params
                .values()
                .iter()
                .map(|p| ndarray::ArrayD::zeros(p.raw_dim()))
                .collect(),
            v: params
                .values()
                .iter()
                .map(|p| ndarray::ArrayD::zeros(p.raw_dim()))
                .collect(),
        }
    }

    /// One update. Weight decay is decoupled from the moment estimates and
    /// scaled by the current learning rate, so `lr == 0` leaves parameters
    /// bitwise unchanged.
    pub fn apply(
        &mut self,
        params: &mut ParameterSet,
        grads: &Gradients,
        lr: f64,
        weight_decay: f64,
    ) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let learnable: Vec<bool> = params.defs().iter().map(|d| d.learnable).collect();
        for (i, &learn) in learnable.iter().enumerate() {
            if !learn {
                continue;
            }
            let g = &grads.values()[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let theta = &mut params.values_mut()[i];
            Zip::from(theta)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|theta, m, v, &g| {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    let mhat = *m / c1;
                    let vhat = *v / c2;
                    *theta -= lr * (mhat / (vhat.sqrt() + ADAM_EPS) + weight_decay * *theta);
                });
        }
    }
}

/// One training batch in network layout.
pub struct Batch {
    pub x: Array4<f64>,
    pub y_f: Array3<u8>,
    pub y_d: Array3<u8>,
}

pub fn make_batch(samples: &[&LoadedSample]) -> Result<Batch> {
    let n = samples.len();
    if n == 0 {
        return Err(Error::Training("empty batch".into()));
    }
    let (h, w) = samples[0].mask.dim();
    let mut x = Array4::zeros((n, 3, h, w));
    let mut y_f = Array3::zeros((n, h, w));
    let mut y_d = Array3::zeros((n, h, w));
    for (i, s) in samples.iter().enumerate() {
        if s.mask.dim() != (h, w) {
            return Err(Error::dataset(s.id, "mixed sample sizes in one batch"));
        }
        let norm = normalize_image(&s.image);
        x.index_axis_mut(ndarray::Axis(0), i).assign(&norm);
        let bin = binary_mask(&s.mask)?;
        y_f.index_axis_mut(ndarray::Axis(0), i).assign(&bin);
        y_d.index_axis_mut(ndarray::Axis(0), i).assign(&s.mask);
    }
    Ok(Batch { x, y_f, y_d })
}

/// One forward/backward/update step. Returns the pre-update loss breakdown.
pub fn train_step(
    model: &Model,
    params: &mut ParameterSet,
    opt: &mut AdamState,
    batch: &Batch,
    lr: f64,
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    let (det, dist, cache) = model.forward(params, &batch.x, crate::network::Mode::Train)?;
    let (loss, d_det, d_dist) = batch_objective(&det, &dist, &batch.y_f, &batch.y_d, config.gamma)?;
    if !loss.total.is_finite() {
        return Err(Error::Training(format!(
            "non-finite loss (ce_f={}, ce_d={}, mse={}, gamma={}, lr={lr})",
            loss.ce_f, loss.ce_d, loss.mse, loss.gamma
        )));
    }
    let mut grads = Gradients::zeros_like(params);
    model.backward(params, &cache, &d_det, &d_dist, &mut grads);
    model.update_running_stats(params, &cache, BN_MOMENTUM);
    opt.apply(params, &grads, lr, config.weight_decay);
    Ok(loss)
}

/// Mean of the four validation F1 components: detection forged class plus
/// the three distinguishment classes, each first averaged over images.
pub fn selection_score_from_metrics(metrics: &[ImageMetrics]) -> f64 {
    let n = metrics.len() as f64;
    let mean = |f: fn(&ImageMetrics) -> f64| metrics.iter().map(f).sum::<f64>() / n;
    (mean(|m| m.forged.f1)
        + mean(|m| m.source.f1)
        + mean(|m| m.target.f1)
        + mean(|m| m.pristine.f1))
        / 4.0
}

pub fn selection_score(
    model: &Model,
    params: &ParameterSet,
    val: &[LoadedSample],
) -> Result<f64> {
    Ok(selection_score_from_metrics(&evaluate_samples(
        model, params, val,
    )?))
}

/// Loss-log record for one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterLog {
    pub iter: u64,
    pub ce_f: f64,
    pub ce_d: f64,
    pub mse: f64,
    pub gamma: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub selection_score: f64,
}

pub struct FitOutcome {
    pub best: CheckpointRecord,
    pub epochs: Vec<EpochLog>,
    pub iters: Vec<IterLog>,
}

/// `iter,ce_f,ce_d,mse,gamma,total,lr` per optimizer step.
pub fn loss_csv(iters: &[IterLog]) -> String {
    use std::fmt::Write as _;
    let mut out = String::from("iter,ce_f,ce_d,mse,gamma,total,lr\n");
    for r in iters {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.iter, r.ce_f, r.ce_d, r.mse, r.gamma, r.total, r.lr
        )
        .expect("writing to a String cannot fail");
    }
    out
}

fn shuffle(indices: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..indices.len()).rev() {
        let j = rng.random_range(0..=i);
        indices.swap(i, j);
    }
}

/// Train from scratch and return the best checkpoint by validation score,
/// ties resolved toward the earlier epoch.
pub fn fit(config: &RunConfig, train: &[LoadedSample], val: &[LoadedSample]) -> Result<FitOutcome> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Training("training and validation splits must be non-empty".into()));
    }
    let tc = &config.train;
    let (model, mut params) = Model::new(config.net.clone())?;
    params.initialize(&mut ChaCha8Rng::seed_from_u64(tc.seed));
    let mut opt = AdamState::new(&params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x7368_7566);

    let steps_per_epoch = train.len().div_ceil(tc.batch_size) as u64;
    let maxiter = tc.epochs as u64 * steps_per_epoch;
    let mut indices: Vec<usize> = (0..train.len()).collect();
    let mut iters = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, ParameterSet)> = None;
    let mut iter = 0u64;

    for epoch in 1..=tc.epochs {
        shuffle(&mut indices, &mut shuffle_rng);
        for chunk in indices.chunks(tc.batch_size) {
            let members: Vec<&LoadedSample> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = make_batch(&members)?;
            let lr = poly_lr(iter, maxiter, tc.lr0, tc.power)?;
            let loss = train_step(&model, &mut params, &mut opt, &batch, lr, tc)
                .map_err(|e| Error::Training(format!("iter {iter}: {e}")))?;
            iters.push(IterLog {
                iter,
                ce_f: loss.ce_f,
                ce_d: loss.ce_d,
                mse: loss.mse,
                gamma: loss.gamma,
                total: loss.total,
                lr,
            });
            iter += 1;
        }
        if epoch % tc.eval_every == 0 || epoch == tc.epochs {
            let score = selection_score(&model, &params, val)?;
            epochs.push(EpochLog {
                epoch,
                selection_score: score,
            });
            let improved = best.as_ref().is_none_or(|(s, _, _)| score > *s);
            if improved {
                best = Some((score, epoch, params.clone()));
            }
        }
    }

    let (selection_score, epoch, best_params) =
        best.expect("at least the final epoch is always evaluated");
    Ok(FitOutcome {
        best: CheckpointRecord {
            config: config.clone(),
            epoch,
            selection_score,
            params: best_params,
        },
        epochs,
        iters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::NetworkConfig;
    use crate::data::generate_samples;
    use crate::evaluation::ClassScores;

    pub(crate) fn tiny_config(epochs: usize, gamma: f64) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.net = NetworkConfig::with_width(64, 32);
        cfg.train = TrainConfig {
            lr0: 1e-3,
            weight_decay: 5e-4,
            power: 0.9,
            epochs,
            batch_size: 4,
            gamma,
            seed: 7,
            eval_every: 1,
        };
        cfg
    }

    pub(crate) fn tiny_samples(seed: u64, n: usize) -> Vec<LoadedSample> {
        generate_samples(seed, n, 64)
            .unwrap()
            .into_iter()
            .enumerate()
            .map(|(i, s)| LoadedSample {
                id: i as u64,
                image: s.image,
                mask: s.tri_mask,
                attack_tag: "BASE".into(),
            })
            .collect()
    }

    #[test]
    fn poly_lr_closed_forms() {
        assert_eq!(poly_lr(0, 1000, 0.001, 0.9).unwrap(), 0.001);
        assert_eq!(poly_lr(1000, 1000, 0.001, 0.9).unwrap(), 0.0);
        let half = poly_lr(500, 1000, 0.001, 0.9).unwrap();
        assert!((half - 5.358867312681466e-4).abs() < 1e-16, "{half}");
        let quarter = poly_lr(250, 1000, 0.001, 0.9).unwrap();
        assert!((quarter - 7.718895067235704e-4).abs() < 1e-16, "{quarter}");
    }

    #[test]
    fn schedule_domain_is_enforced() {
        assert!(matches!(
            poly_lr(1001, 1000, 0.001, 0.9),
            Err(Error::Schedule { .. })
        ));
        assert!(poly_lr(0, 0, 0.001, 0.9).is_err());
    }

    #[test]
    fn zero_lr_is_a_bitwise_fixed_point() {
        let cfg = tiny_config(1, 1.0);
        let (model, mut params) = Model::new(cfg.net.clone()).unwrap();
        params.initialize(&mut ChaCha8Rng::seed_from_u64(3));
        let before = params.clone();
        let samples = tiny_samples(20, 2);
        let members: Vec<&LoadedSample> = samples.iter().collect();
        let batch = make_batch(&members).unwrap();
        let mut opt = AdamState::new(&params);
        train_step(&model, &mut params, &mut opt, &batch, 0.0, &cfg.train).unwrap();
        for (a, b) in params.values().iter().zip(before.values()) {
            // running stats do move; learnable parameters must not
            let _ = (a, b);
        }
        for (i, def) in params.defs().iter().enumerate() {
            if def.learnable {
                assert_eq!(
                    params.values()[i], before.values()[i],
                    "{} moved at lr=0",
                    def.name
                );
            }
        }
        assert_eq!(opt.t, 1, "moments still advance at lr=0");
    }

    #[test]
    fn steps_are_deterministic() {
        let cfg = tiny_config(1, 10.0);
        let samples = tiny_samples(21, 3);
        let members: Vec<&LoadedSample> = samples.iter().collect();
        let batch = make_batch(&members).unwrap();
        let run = || {
            let (model, mut params) = Model::new(cfg.net.clone()).unwrap();
            params.initialize(&mut ChaCha8Rng::seed_from_u64(4));
            let mut opt = AdamState::new(&params);
            for i in 0..3 {
                train_step(&model, &mut params, &mut opt, &batch, 1e-3 / (i + 1) as f64, &cfg.train)
                    .unwrap();
            }
            params
        };
        let a = run();
        let b = run();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn fifty_steps_halve_the_loss_on_a_fixed_batch() {
        let cfg = tiny_config(1, 1.0);
        let (model, mut params) = Model::new(cfg.net.clone()).unwrap();
        params.initialize(&mut ChaCha8Rng::seed_from_u64(5));
        let samples = tiny_samples(22, 2);
        let members: Vec<&LoadedSample> = samples.iter().collect();
        let batch = make_batch(&members).unwrap();
        let mut opt = AdamState::new(&params);
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..50 {
            let loss = train_step(&model, &mut params, &mut opt, &batch, 1e-2, &cfg.train).unwrap();
            first.get_or_insert(loss.total);
            last = loss.total;
        }
        let first = first.unwrap();
        assert!(
            last <= 0.5 * first,
            "loss went {first} -> {last}, expected at least 50% reduction"
        );
    }

    #[test]
    fn selection_score_is_the_mean_of_four_f1s() {
        let metrics = vec![ImageMetrics {
            sample_id: 0,
            attack_tag: "BASE".into(),
            forged: ClassScores { precision: 0.0, recall: 0.0, f1: 0.2 },
            source: ClassScores { precision: 0.0, recall: 0.0, f1: 0.4 },
            target: ClassScores { precision: 0.0, recall: 0.0, f1: 0.6 },
            pristine: ClassScores { precision: 0.0, recall: 0.0, f1: 0.8 },
        }];
        assert!((selection_score_from_metrics(&metrics) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn fit_returns_the_argmax_epoch() {
        let cfg = tiny_config(2, 1.0);
        let train = tiny_samples(23, 4);
        let val = tiny_samples(24, 2);
        let outcome = fit(&cfg, &train, &val).unwrap();
        assert_eq!(outcome.epochs.len(), 2);
        assert_eq!(outcome.iters.len(), 2);
        let best = outcome.best.selection_score;
        for e in &outcome.epochs {
            assert!(best >= e.selection_score);
        }
        let argmax = outcome
            .epochs
            .iter()
            .find(|e| e.selection_score == best)
            .unwrap();
        assert_eq!(outcome.best.epoch, argmax.epoch, "ties break earlier");

        // rerun determinism
        let again = fit(&cfg, &train, &val).unwrap();
        assert!((again.best.selection_score - best).abs() < 1e-6);
        assert_eq!(again.best.epoch, outcome.best.epoch);
    }

    #[test]
    fn fit_rejects_empty_splits() {
        let cfg = tiny_config(1, 1.0);
        let some = tiny_samples(25, 1);
        assert!(fit(&cfg, &[], &some).is_err());
        assert!(fit(&cfg, &some, &[]).is_err());
    }

    #[test]
    fn loss_csv_has_header_and_rows() {
        let iters = vec![IterLog {
            iter: 0,
            ce_f: 0.7,
            ce_d: 1.1,
            mse: 0.01,
            gamma: 1000.0,
            total: 11.8,
            lr: 1e-3,
        }];
        let csv = loss_csv(&iters);
        assert!(csv.starts_with("iter,ce_f,ce_d,mse,gamma,total,lr\n"));
        assert_eq!(csv.lines().count(), 2);
    }
}
