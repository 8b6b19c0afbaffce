//! Training objective: per-branch cross-entropies plus a weighted
//! mean-squared consistency term tying the two branches' forged-probability
//! maps together.

use ndarray::{Array2, Array3, Array4, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Floor applied inside every `log`, so saturated predictions yield a large
/// finite loss instead of infinity.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub ce_f: f64,
    pub ce_d: f64,
    pub mse: f64,
    pub gamma: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Compose a breakdown; `total` is always `ce_f + ce_d + gamma * mse`
    /// in exactly this accumulation order.
    pub fn new(ce_f: f64, ce_d: f64, mse: f64, gamma: f64) -> LossBreakdown {
        LossBreakdown {
            ce_f,
            ce_d,
            mse,
            gamma,
            total: ce_f + ce_d + gamma * mse,
        }
    }
}

fn clamped_ln(p: f64) -> f64 {
    p.max(LOG_CLAMP).ln()
}

fn softmax2(a: f64, b: f64) -> (f64, f64) {
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    let s = ea + eb;
    (ea / s, eb / s)
}

fn softmax3(a: f64, b: f64, c: f64) -> (f64, f64, f64) {
    let m = a.max(b).max(c);
    let (ea, eb, ec) = ((a - m).exp(), (b - m).exp(), (c - m).exp());
    let s = ea + eb + ec;
    (ea / s, eb / s, ec / s)
}

fn check_spatial(context: &'static str, expected: (usize, usize), got: (usize, usize)) -> Result<()> {
    if expected != got {
        return Err(Error::Shape {
            context,
            expected: format!("{expected:?}"),
            got: format!("{got:?}"),
        });
    }
    Ok(())
}

/// Binary cross-entropy over the two-channel detection logits
/// (channel 0 = pristine, channel 1 = forged), averaged over pixels.
pub fn ce_binary(det_logits: &Array3<f64>, y_f: &Array2<u8>) -> Result<f64> {
    let (c, h, w) = det_logits.dim();
    if c != 2 {
        return Err(Error::Shape {
            context: "ce_binary logits".into(),
            expected: "(2, H, W)".into(),
            got: format!("{:?}", det_logits.dim()),
        });
    }
    check_spatial("ce_binary mask", (h, w), y_f.dim())?;
    let mut sum = 0.0;
    for y in 0..h {
        for x in 0..w {
            let label = y_f[(y, x)];
            if label > 1 {
                return Err(Error::Dataset {
                    sample_id: None,
                    reason: format!("binary mask value {label} at ({y}, {x})"),
                });
            }
            let (p0, p1) = softmax2(det_logits[(0, y, x)], det_logits[(1, y, x)]);
            sum += if label == 1 { clamped_ln(p1) } else { clamped_ln(p0) };
        }
    }
    Ok(-sum / (h * w) as f64)
}

/// Three-class cross-entropy over the distinguishment logits
/// (0 = pristine, 1 = source, 2 = target), averaged over pixels.
pub fn ce_three(dist_logits: &Array3<f64>, y_d: &Array2<u8>) -> Result<f64> {
    let (c, h, w) = dist_logits.dim();
    if c != 3 {
        return Err(Error::Shape {
            context: "ce_three logits".into(),
            expected: "(3, H, W)".into(),
            got: format!("{:?}", dist_logits.dim()),
        });
    }
    check_spatial("ce_three mask", (h, w), y_d.dim())?;
    let mut sum = 0.0;
    for y in 0..h {
        for x in 0..w {
            let label = y_d[(y, x)];
            if label > 2 {
                return Err(Error::Dataset {
                    sample_id: None,
                    reason: format!("three-class mask value {label} at ({y}, {x})"),
                });
            }
            let p = softmax3(
                dist_logits[(0, y, x)],
                dist_logits[(1, y, x)],
                dist_logits[(2, y, x)],
            );
            let p_label = [p.0, p.1, p.2][label as usize];
            sum += clamped_ln(p_label);
        }
    }
    Ok(-sum / (h * w) as f64)
}

/// Mean squared difference between the detection branch's forged probability
/// and the distinguishment branch's source+target probability.
pub fn mse_consistency(det_logits: &Array3<f64>, dist_logits: &Array3<f64>) -> Result<f64> {
    let (_, h, w) = det_logits.dim();
    check_spatial(
        "mse_consistency",
        (h, w),
        (dist_logits.dim().1, dist_logits.dim().2),
    )?;
    let mut sum = 0.0;
    for y in 0..h {
        for x in 0..w {
            let (_, pf) = softmax2(det_logits[(0, y, x)], det_logits[(1, y, x)]);
            let (_, ps, pt) = softmax3(
                dist_logits[(0, y, x)],
                dist_logits[(1, y, x)],
                dist_logits[(2, y, x)],
            );
            let d = pf - (ps + pt);
            sum += d * d;
        }
    }
    Ok(sum / (h * w) as f64)
}

/// Full objective for one image.
pub fn total_loss(
    det_logits: &Array3<f64>,
    dist_logits: &Array3<f64>,
    y_f: &Array2<u8>,
    y_d: &Array2<u8>,
    gamma: f64,
) -> Result<LossBreakdown> {
    if gamma < 0.0 {
        return Err(Error::Config(format!("gamma must be >= 0, got {gamma}")));
    }
    let ce_f = ce_binary(det_logits, y_f)?;
    let ce_d = ce_three(dist_logits, y_d)?;
    let mse = mse_consistency(det_logits, dist_logits)?;
    Ok(LossBreakdown::new(ce_f, ce_d, mse, gamma))
}

/// Batched objective with analytic gradients w.r.t. both logit tensors.
/// Losses are averaged over the batch; gradients match that scaling. The
/// consistency term backpropagates into both branches.
pub fn batch_objective(
    det_logits: &Array4<f64>,
    dist_logits: &Array4<f64>,
    y_f: &Array3<u8>,
    y_d: &Array3<u8>,
    gamma: f64,
) -> Result<(LossBreakdown, Array4<f64>, Array4<f64>)> {
    let (n, _, h, w) = det_logits.dim();
    if dist_logits.dim() != (n, 3, h, w) || det_logits.dim().1 != 2 {
        return Err(Error::Shape {
            context: "batch_objective logits".into(),
            expected: format!("(({n}, 2, {h}, {w}), ({n}, 3, {h}, {w}))"),
            got: format!("({:?}, {:?})", det_logits.dim(), dist_logits.dim()),
        });
    }
    if y_f.dim() != (n, h, w) || y_d.dim() != (n, h, w) {
        return Err(Error::Shape {
            context: "batch_objective masks".into(),
            expected: format!("({n}, {h}, {w})"),
            got: format!("({:?}, {:?})", y_f.dim(), y_d.dim()),
        });
    }
    if gamma < 0.0 {
        return Err(Error::Config(format!("gamma must be >= 0, got {gamma}")));
    }

    let per_sample: Vec<Result<_>> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let det = det_logits.index_axis(Axis(0), ni);
            let dist = dist_logits.index_axis(Axis(0), ni);
            let yf = y_f.index_axis(Axis(0), ni);
            let yd = y_d.index_axis(Axis(0), ni);
            let inv_hw = 1.0 / (h * w) as f64;

            let mut ce_f = 0.0;
            let mut ce_d = 0.0;
            let mut mse = 0.0;
            let mut d_det = Array3::<f64>::zeros((2, h, w));
            let mut d_dist = Array3::<f64>::zeros((3, h, w));
            for y in 0..h {
                for x in 0..w {
                    let label_f = yf[(y, x)];
                    let label_d = yd[(y, x)];
                    if label_f > 1 || label_d > 2 {
                        return Err(Error::Dataset {
                            sample_id: None,
                            reason: format!(
                                "mask labels ({label_f}, {label_d}) out of range at ({y}, {x})"
                            ),
                        });
                    }
                    let (p0, p1) = softmax2(det[(0, y, x)], det[(1, y, x)]);
                    let pd = softmax3(dist[(0, y, x)], dist[(1, y, x)], dist[(2, y, x)]);
                    let pdv = [pd.0, pd.1, pd.2];

                    // Cross-entropies. dL/dp for a clamped log is zero below
                    // the clamp, so saturated channels contribute no pull.
                    let p_lab_f = if label_f == 1 { p1 } else { p0 };
                    ce_f -= inv_hw * clamped_ln(p_lab_f);
                    if p_lab_f > LOG_CLAMP {
                        // standard softmax-CE gradient (p - onehot) / HW
                        let g0 = (p0 - if label_f == 0 { 1.0 } else { 0.0 }) * inv_hw;
                        let g1 = (p1 - if label_f == 1 { 1.0 } else { 0.0 }) * inv_hw;
                        d_det[(0, y, x)] += g0;
                        d_det[(1, y, x)] += g1;
                    }
                    let p_lab_d = pdv[label_d as usize];
                    ce_d -= inv_hw * clamped_ln(p_lab_d);
                    if p_lab_d > LOG_CLAMP {
                        for ch in 0..3 {
                            let onehot = if ch == label_d as usize { 1.0 } else { 0.0 };
                            d_dist[(ch, y, x)] += (pdv[ch] - onehot) * inv_hw;
                        }
                    }

                    // Consistency: r = p1 - (ps + pt), contributes r^2 / HW.
                    let r = p1 - (pd.1 + pd.2);
                    mse += inv_hw * r * r;
                    let w_mse = gamma * 2.0 * r * inv_hw;
                    // through det softmax: d p1 / d logit = p1 (delta - p)
                    d_det[(0, y, x)] += w_mse * (-p1 * p0);
                    d_det[(1, y, x)] += w_mse * (p1 * (1.0 - p1));
                    // through dist softmax: d (ps + pt) / d logit_c
                    let s = pd.1 + pd.2;
                    d_dist[(0, y, x)] += -w_mse * (-s * pd.0);
                    d_dist[(1, y, x)] += -w_mse * (pd.1 - s * pd.1);
                    d_dist[(2, y, x)] += -w_mse * (pd.2 - s * pd.2);
                }
            }
            Ok((ce_f, ce_d, mse, d_det, d_dist))
        })
        .collect();

    let inv_n = 1.0 / n as f64;
    let mut ce_f = 0.0;
    let mut ce_d = 0.0;
    let mut mse = 0.0;
    let mut d_det = Array4::zeros(det_logits.raw_dim());
    let mut d_dist = Array4::zeros(dist_logits.raw_dim());
    for (ni, r) in per_sample.into_iter().enumerate() {
        let (f, d, m, g_det, g_dist) = r?;
        ce_f += f * inv_n;
        ce_d += d * inv_n;
        mse += m * inv_n;
        d_det
            .index_axis_mut(Axis(0), ni)
            .assign(&(g_det * inv_n));
        d_dist
            .index_axis_mut(Axis(0), ni)
            .assign(&(g_dist * inv_n));
    }
    Ok((LossBreakdown::new(ce_f, ce_d, mse, gamma), d_det, d_dist))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::testsupport::random_tensor;
    use ndarray::Array2;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn logits_for_probs2(p1: f64, h: usize, w: usize) -> Array3<f64> {
        let mut l = Array3::zeros((2, h, w));
        l.index_axis_mut(Axis(0), 0).fill((1.0 - p1).ln());
        l.index_axis_mut(Axis(0), 1).fill(p1.ln());
        l
    }

    fn logits_for_probs3(p: [f64; 3], h: usize, w: usize) -> Array3<f64> {
        let mut l = Array3::zeros((3, h, w));
        for c in 0..3 {
            l.index_axis_mut(Axis(0), c).fill(p[c].ln());
        }
        l
    }

    #[test]
    fn ce_binary_closed_forms() {
        let (h, w) = (4, 5);
        // saturated correct predictions
        let mut logits = Array3::zeros((2, h, w));
        let mut y = Array2::zeros((h, w));
        for yy in 0..h {
            for xx in 0..w {
                let forged = (yy + xx) % 2 == 0;
                y[(yy, xx)] = forged as u8;
                logits[(forged as usize, yy, xx)] = 20.0;
                logits[(!forged as usize, yy, xx)] = -20.0;
            }
        }
        assert!(ce_binary(&logits, &y).unwrap() < 1e-6);

        // uniform prediction
        let zero = Array3::zeros((2, h, w));
        let loss = ce_binary(&zero, &y).unwrap();
        assert!((loss - (2.0f64).ln()).abs() < 1e-6);

        // all-forged labels against p == 0.25
        let ones = Array2::from_elem((h, w), 1u8);
        let loss = ce_binary(&logits_for_probs2(0.25, h, w), &ones).unwrap();
        assert!((loss + (0.25f64).ln()).abs() < 1e-6);
    }

    #[test]
    fn ce_three_closed_forms() {
        let (h, w) = (3, 3);
        let mut logits = Array3::zeros((3, h, w));
        let mut y = Array2::zeros((h, w));
        for yy in 0..h {
            for xx in 0..w {
                let label = ((yy * 3 + xx) % 3) as u8;
                y[(yy, xx)] = label;
                for c in 0..3u8 {
                    logits[(c as usize, yy, xx)] = if c == label { 20.0 } else { -20.0 };
                }
            }
        }
        assert!(ce_three(&logits, &y).unwrap() < 1e-6);

        let zero = Array3::zeros((3, h, w));
        assert!((ce_three(&zero, &y).unwrap() - (3.0f64).ln()).abs() < 1e-6);

        let single = logits_for_probs3([0.2, 0.3, 0.5], 1, 1);
        let y2 = Array2::from_elem((1, 1), 2u8);
        assert!((ce_three(&single, &y2).unwrap() + (0.5f64).ln()).abs() < 1e-6);
    }

    #[test]
    fn ce_rejects_bad_labels_and_shapes() {
        let logits = Array3::zeros((2, 2, 2));
        let bad = Array2::from_elem((2, 2), 2u8);
        assert!(ce_binary(&logits, &bad).is_err());
        let logits3 = Array3::zeros((3, 2, 2));
        let bad3 = Array2::from_elem((2, 2), 3u8);
        assert!(ce_three(&logits3, &bad3).is_err());
        let small = Array2::zeros((2, 3));
        assert!(ce_binary(&logits, &small).is_err());
    }

    #[test]
    fn mse_closed_forms() {
        let (h, w) = (4, 4);
        // agreement: forged prob 0.4 on both branches
        let det = logits_for_probs2(0.4, h, w);
        let dist = logits_for_probs3([0.6, 0.15, 0.25], h, w);
        assert!(mse_consistency(&det, &dist).unwrap() < 1e-10);

        // maximal disagreement
        let mut det1 = Array3::zeros((2, h, w));
        det1.index_axis_mut(Axis(0), 0).fill(-50.0);
        det1.index_axis_mut(Axis(0), 1).fill(50.0);
        let mut dist0 = Array3::zeros((3, h, w));
        dist0.index_axis_mut(Axis(0), 0).fill(50.0);
        dist0.index_axis_mut(Axis(0), 1).fill(-50.0);
        dist0.index_axis_mut(Axis(0), 2).fill(-50.0);
        assert_eq!(mse_consistency(&det1, &dist0).unwrap(), 1.0);

        // 0.75 vs 0.25
        let det75 = logits_for_probs2(0.75, h, w);
        let dist25 = logits_for_probs3([0.75, 0.125, 0.125], h, w);
        assert!((mse_consistency(&det75, &dist25).unwrap() - 0.25).abs() < 1e-10);
    }

    #[test]
    fn mse_symmetry_nonnegativity_zero_iff_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        for _ in 0..50 {
            let pf: f64 = rng.random_range(0.01..0.99);
            let pd: f64 = rng.random_range(0.01..0.99);
            let det = logits_for_probs2(pf, 2, 2);
            let dist = logits_for_probs3([1.0 - pd, pd / 2.0, pd / 2.0], 2, 2);
            let m = mse_consistency(&det, &dist).unwrap();
            // swap roles
            let det_swap = logits_for_probs2(pd, 2, 2);
            let dist_swap = logits_for_probs3([1.0 - pf, pf / 2.0, pf / 2.0], 2, 2);
            let m_swap = mse_consistency(&det_swap, &dist_swap).unwrap();
            assert!(m >= 0.0);
            assert!((m - m_swap).abs() < 1e-9, "not symmetric: {m} vs {m_swap}");
            if (pf - pd).abs() > 1e-6 {
                assert!(m > 0.0);
            }
        }
    }

    #[test]
    fn ce_binary_equals_restricted_ce_three() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let (h, w) = (6, 6);
        let det: Array3<f64> = random_tensor(&[2, h, w], 3.0, &mut rng)
            .into_dimensionality()
            .unwrap();
        let mut dist = Array3::from_elem((3, h, w), -1000.0);
        // three-class channels (pristine, source, _) mirror the binary pair
        dist.index_axis_mut(Axis(0), 0)
            .assign(&det.index_axis(Axis(0), 0));
        dist.index_axis_mut(Axis(0), 1)
            .assign(&det.index_axis(Axis(0), 1));
        let y = Array2::from_shape_fn((h, w), |(a, b)| ((a + b) % 2) as u8);
        let bce = ce_binary(&det, &y).unwrap();
        let tce = ce_three(&dist, &y).unwrap();
        assert!((bce - tce).abs() < 1e-6, "{bce} vs {tce}");
    }

    #[test]
    fn total_loss_composition() {
        let b = LossBreakdown::new(0.5, 0.7, 0.001, 1000.0);
        assert!((b.total - 2.2).abs() < 1e-9);

        let b0 = LossBreakdown::new(0.5, 0.7, 0.123, 0.0);
        assert_eq!(b0.total, 0.5 + 0.7);

        // perfect consistent predictions
        let (h, w) = (4, 4);
        let mut det = Array3::zeros((2, h, w));
        det.index_axis_mut(Axis(0), 0).fill(30.0);
        det.index_axis_mut(Axis(0), 1).fill(-30.0);
        let mut dist = Array3::zeros((3, h, w));
        dist.index_axis_mut(Axis(0), 0).fill(30.0);
        dist.index_axis_mut(Axis(0), 1).fill(-30.0);
        dist.index_axis_mut(Axis(0), 2).fill(-30.0);
        let y = Array2::zeros((h, w));
        let b = total_loss(&det, &dist, &y, &y, 1000.0).unwrap();
        assert!(b.total < 1e-5, "total {}", b.total);
    }

    #[test]
    fn total_monotone_in_gamma_when_inconsistent() {
        let det = logits_for_probs2(0.9, 3, 3);
        let dist = logits_for_probs3([0.8, 0.1, 0.1], 3, 3);
        let y = Array2::zeros((3, 3));
        let t: Vec<f64> = [0.0, 1.0, 1000.0]
            .iter()
            .map(|&g| total_loss(&det, &dist, &y, &y, g).unwrap().total)
            .collect();
        assert!(t[0] < t[1] && t[1] < t[2]);
    }

    #[test]
    fn batch_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let (n, h, w) = (2, 3, 4);
        let mut det: Array4<f64> = random_tensor(&[n, 2, h, w], 2.0, &mut rng)
            .into_dimensionality()
            .unwrap();
        let mut dist: Array4<f64> = random_tensor(&[n, 3, h, w], 2.0, &mut rng)
            .into_dimensionality()
            .unwrap();
        let y_f = Array3::from_shape_fn((n, h, w), |(a, b, c)| ((a + b + c) % 2) as u8);
        let y_d = Array3::from_shape_fn((n, h, w), |(a, b, c)| ((a + 2 * b + c) % 3) as u8);
        let gamma = 7.0;

        let (loss, d_det, d_dist) = batch_objective(&det, &dist, &y_f, &y_d, gamma).unwrap();
        assert!((loss.total - (loss.ce_f + loss.ce_d + gamma * loss.mse)).abs() < 1e-15);

        let step = 1e-6;
        for idx in 0..det.len() {
            let orig = det.as_slice().unwrap()[idx];
            det.as_slice_mut().unwrap()[idx] = orig + step;
            let plus = batch_objective(&det, &dist, &y_f, &y_d, gamma).unwrap().0.total;
            det.as_slice_mut().unwrap()[idx] = orig - step;
            let minus = batch_objective(&det, &dist, &y_f, &y_d, gamma).unwrap().0.total;
            det.as_slice_mut().unwrap()[idx] = orig;
            let fd = (plus - minus) / (2.0 * step);
            let got = d_det.as_slice().unwrap()[idx];
            assert!(
                crate::ops::testsupport::rel_err(fd, got) < 1e-4,
                "d_det[{idx}]: fd {fd} vs {got}"
            );
        }
        for idx in 0..dist.len() {
            let orig = dist.as_slice().unwrap()[idx];
            dist.as_slice_mut().unwrap()[idx] = orig + step;
            let plus = batch_objective(&det, &dist, &y_f, &y_d, gamma).unwrap().0.total;
            dist.as_slice_mut().unwrap()[idx] = orig - step;
            let minus = batch_objective(&det, &dist, &y_f, &y_d, gamma).unwrap().0.total;
            dist.as_slice_mut().unwrap()[idx] = orig;
            let fd = (plus - minus) / (2.0 * step);
            let got = d_dist.as_slice().unwrap()[idx];
            assert!(
                crate::ops::testsupport::rel_err(fd, got) < 1e-4,
                "d_dist[{idx}]: fd {fd} vs {got}"
            );
        }
    }

    #[test]
    fn batch_loss_matches_per_image_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let (n, h, w) = (3, 4, 4);
        let det: Array4<f64> = random_tensor(&[n, 2, h, w], 2.0, &mut rng)
            .into_dimensionality()
            .unwrap();
        let dist: Array4<f64> = random_tensor(&[n, 3, h, w], 2.0, &mut rng)
            .into_dimensionality()
            .unwrap();
        let y_f = Array3::from_shape_fn((n, h, w), |(a, b, c)| ((a + b + c) % 2) as u8);
        let y_d = Array3::from_shape_fn((n, h, w), |(a, b, c)| ((a + b + 2 * c) % 3) as u8);
        let (batch, _, _) = batch_objective(&det, &dist, &y_f, &y_d, 5.0).unwrap();

        let mut mean = 0.0;
        for i in 0..n {
            let b = total_loss(
                &det.index_axis(Axis(0), i).to_owned(),
                &dist.index_axis(Axis(0), i).to_owned(),
                &y_f.index_axis(Axis(0), i).to_owned(),
                &y_d.index_axis(Axis(0), i).to_owned(),
                5.0,
            )
            .unwrap();
            mean += b.total / n as f64;
        }
        assert!((batch.total - mean).abs() < 1e-12);
    }
}
