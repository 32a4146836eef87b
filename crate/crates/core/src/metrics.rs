//! Line-detection and T2*-map quality metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParameterMaps, VolumeMask};

fn check_pair(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("length mismatch: {a} vs {b}")));
    }
    if a == 0 {
        return Err(Error::EmptyRegion("empty mask".into()));
    }
    Ok(())
}

pub fn mask_mae(pred: &[f64], reference: &[f64]) -> Result<f64> {
    check_pair(pred.len(), reference.len())?;
    Ok(pred.iter().zip(reference).map(|(p, r)| (p - r).abs()).sum::<f64>() / pred.len() as f64)
}

/// Fraction of lines whose thresholded prediction equals the reference.
pub fn mask_accuracy(pred: &[f64], reference: &[f64], threshold: f64) -> Result<f64> {
    check_pair(pred.len(), reference.len())?;
    let hits = pred
        .iter()
        .zip(reference)
        .filter(|(p, r)| (**p >= threshold) == (**r >= 0.5))
        .count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Precision and recall of detecting corrupted lines, with corrupted-score
/// `1 - pred`, at descending thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub thresholds: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

pub fn pr_curve(pred: &[f64], reference: &[f64], n_thresholds: usize) -> Result<PrCurve> {
    check_pair(pred.len(), reference.len())?;
    if n_thresholds < 2 {
        return Err(Error::InvalidArgument("need at least 2 thresholds".into()));
    }
    let scores: Vec<f64> = pred.iter().map(|p| 1.0 - p).collect();
    let positive: Vec<bool> = reference.iter().map(|r| *r < 0.5).collect();
    let n_pos = positive.iter().filter(|p| **p).count();
    let mut curve = PrCurve {
        thresholds: Vec::with_capacity(n_thresholds),
        precision: Vec::with_capacity(n_thresholds),
        recall: Vec::with_capacity(n_thresholds),
    };
    for k in 0..n_thresholds {
        let tau = 1.0 - k as f64 / (n_thresholds - 1) as f64;
        let (mut tp, mut fp) = (0usize, 0usize);
        for (s, p) in scores.iter().zip(&positive) {
            if *s >= tau {
                if *p {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        curve.thresholds.push(tau);
        curve.precision.push(if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 });
        curve.recall.push(if n_pos == 0 { 1.0 } else { tp as f64 / n_pos as f64 });
    }
    Ok(curve)
}

impl PrCurve {
    /// Best precision among points reaching at least `recall`.
    pub fn interpolated_precision(&self, recall: f64) -> f64 {
        self.recall
            .iter()
            .zip(&self.precision)
            .filter(|(r, _)| **r >= recall)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max)
    }

    /// True when, for every point of `other` with positive recall, this
    /// curve reaches that recall with at least the same precision.
    pub fn dominates(&self, other: &PrCurve) -> bool {
        other
            .recall
            .iter()
            .zip(&other.precision)
            .filter(|(r, _)| **r > 0.0)
            .all(|(r, p)| self.interpolated_precision(*r) >= *p)
    }
}

/// `roi ∧ gradient < max_gradient ∧ both fits valid`.
pub fn evaluation_mask(
    roi: &[bool],
    gradient_ut_per_m: &[f64],
    valid_test: &[bool],
    valid_ref: &[bool],
    max_gradient_ut_per_m: f64,
) -> Result<Vec<bool>> {
    let n = roi.len();
    if gradient_ut_per_m.len() != n || valid_test.len() != n || valid_ref.len() != n {
        return Err(Error::Shape("evaluation inputs differ in size".into()));
    }
    Ok((0..n)
        .map(|i| roi[i] && gradient_ut_per_m[i] < max_gradient_ut_per_m && valid_test[i] && valid_ref[i])
        .collect())
}

pub fn t2star_mae(test: &[f64], reference: &[f64], eval: &[bool]) -> Result<f64> {
    if test.len() != reference.len() || test.len() != eval.len() {
        return Err(Error::Shape("maps and evaluation mask differ in size".into()));
    }
    let (sum, n) = test
        .iter()
        .zip(reference)
        .zip(eval)
        .filter(|(_, e)| **e)
        .fold((0.0, 0usize), |(s, n), ((a, b), _)| (s + (a - b).abs(), n + 1));
    if n == 0 {
        return Err(Error::EmptyRegion("evaluation mask is empty".into()));
    }
    Ok(sum / n as f64)
}

pub const SSIM_RADIUS: usize = 3;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_1d() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut g = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - SSIM_RADIUS as f64;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Mean SSIM over 7x7 Gaussian windows centered inside `eval` and fully
/// inside the image. Both maps are zeroed outside `eval`; the data range is
/// the reference maximum over `eval`.
pub fn ssim(test: &[f64], reference: &[f64], h: usize, w: usize, eval: &[bool]) -> Result<f64> {
    if reference.len() != h * w || eval.len() != h * w {
        return Err(Error::Shape("maps and evaluation mask differ in size".into()));
    }
    let range = reference
        .iter()
        .zip(eval)
        .filter(|(_, e)| **e)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    if !range.is_finite() {
        return Err(Error::EmptyRegion("evaluation mask is empty".into()));
    }
    ssim_with_range(test, reference, h, w, eval, range)
}

pub fn ssim_with_range(test: &[f64], reference: &[f64], h: usize, w: usize, eval: &[bool], data_range: f64) -> Result<f64> {
    let n = h * w;
    if test.len() != n || reference.len() != n || eval.len() != n {
        return Err(Error::Shape("maps and evaluation mask differ in size".into()));
    }
    let r = SSIM_RADIUS;
    if h <= 2 * r || w <= 2 * r {
        return Err(Error::EmptyRegion("maps are smaller than the SSIM window".into()));
    }
    let g = gaussian_1d();
    let a: Vec<f64> = test.iter().zip(eval).map(|(v, e)| if *e { *v } else { 0.0 }).collect();
    let b: Vec<f64> = reference.iter().zip(eval).map(|(v, e)| if *e { *v } else { 0.0 }).collect();
    let products = [
        a.clone(),
        b.clone(),
        a.iter().map(|v| v * v).collect::<Vec<_>>(),
        b.iter().map(|v| v * v).collect::<Vec<_>>(),
        a.iter().zip(&b).map(|(x, y)| x * y).collect::<Vec<_>>(),
    ];
    // separable filtering, valid region only
    let filtered: Vec<Vec<f64>> = products
        .iter()
        .map(|p| {
            let mut rows = vec![0.0; n];
            for y in 0..h {
                for x in r..w - r {
                    rows[y * w + x] = (0..=2 * r).map(|k| g[k] * p[y * w + x + k - r]).sum();
                }
            }
            let mut out = vec![0.0; n];
            for y in r..h - r {
                for x in r..w - r {
                    out[y * w + x] = (0..=2 * r).map(|k| g[k] * rows[(y + k - r) * w + x]).sum();
                }
            }
            out
        })
        .collect();

    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let (mut sum, mut count) = (0.0, 0usize);
    for y in r..h - r {
        for x in r..w - r {
            let i = y * w + x;
            if !eval[i] {
                continue;
            }
            let (mx, my) = (filtered[0][i], filtered[1][i]);
            let vx = filtered[2][i] - mx * mx;
            let vy = filtered[3][i] - my * my;
            let cxy = filtered[4][i] - mx * my;
            sum += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyRegion("no SSIM window is centered in the evaluation mask".into()));
    }
    Ok(sum / count as f64)
}

/// T2* agreement of one slice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceScore {
    pub slice: usize,
    pub t2star_mae_ms: f64,
    pub ssim: f64,
    pub voxels: usize,
}

/// Scores every slice whose evaluation mask is nonempty; other slices are
/// skipped with a warning.
pub fn score_maps(
    test: &ParameterMaps,
    reference: &ParameterMaps,
    roi: &VolumeMask,
    gradient_ut_per_m: &[f64],
    max_gradient_ut_per_m: f64,
) -> Result<Vec<SliceScore>> {
    let d = reference.dims();
    if test.dims() != d || roi.dims() != d || gradient_ut_per_m.len() != d.len() {
        return Err(Error::Shape("maps, roi and gradient map differ in size".into()));
    }
    let plane = d.plane();
    let mut out = Vec::with_capacity(d.slices);
    for s in 0..d.slices {
        let eval = evaluation_mask(
            roi.slice(s),
            &gradient_ut_per_m[s * plane..(s + 1) * plane],
            test.valid_slice(s),
            reference.valid_slice(s),
            max_gradient_ut_per_m,
        )?;
        let voxels = eval.iter().filter(|e| **e).count();
        if voxels == 0 {
            log::warn!("slice {s} has no evaluable voxels");
            continue;
        }
        let (t, r) = (test.t2star_slice(s), reference.t2star_slice(s));
        out.push(SliceScore {
            slice: s,
            t2star_mae_ms: t2star_mae(t, r, &eval)?,
            ssim: ssim(t, r, d.h, d.w, &eval)?,
            voxels,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mask_metric_examples() {
        let r = [1.0, 0.0, 1.0, 1.0];
        assert_eq!(mask_mae(&r, &r).unwrap(), 0.0);
        let flipped: Vec<f64> = r.iter().map(|v| 1.0 - v).collect();
        assert_eq!(mask_mae(&flipped, &r).unwrap(), 1.0);
        assert_eq!(mask_mae(&[0.5; 4], &r).unwrap(), 0.5);
        assert_eq!(mask_accuracy(&r, &r, 0.5).unwrap(), 1.0);
        assert_eq!(mask_accuracy(&[0.0, 0.0, 1.0, 1.0], &[1.0, 1.0, 1.0, 1.0], 0.5).unwrap(), 0.5);
        let mut pred = vec![1.0; 92];
        pred[3] = 0.1;
        pred[40] = 0.2;
        pred[70] = 0.0;
        assert!((mask_accuracy(&pred, &[1.0; 92], 0.5).unwrap() - 0.96739).abs() < 1e-5);
        assert!(mask_mae(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn pr_examples() {
        let reference = [1.0, 0.0, 0.0, 1.0, 1.0];
        let c = pr_curve(&reference, &reference, 101).unwrap();
        let mid = c.thresholds.iter().position(|t| (t - 0.5).abs() < 1e-12).unwrap();
        assert_eq!((c.precision[mid], c.recall[mid]), (1.0, 1.0));
        let ones = pr_curve(&[1.0; 5], &reference, 101).unwrap();
        for (t, r) in ones.thresholds.iter().zip(&ones.recall) {
            if *t > 0.0 {
                assert_eq!(*r, 0.0);
            }
        }
        assert_eq!(c.thresholds.len(), 101);
        assert!(c.recall.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn random_scores_have_base_rate_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pred: Vec<f64> = (0..10_000).map(|_| rng.random_range(0.0..1.0)).collect();
        let reference: Vec<f64> = (0..10_000).map(|i| (i % 2) as f64).collect();
        let c = pr_curve(&pred, &reference, 101).unwrap();
        for (p, t) in c.precision.iter().zip(&c.thresholds) {
            // thresholds near 1 select only a handful of lines
            if *t <= 0.9 {
                assert!((p - 0.5).abs() < 0.05, "precision {p} at {t}");
            }
        }
    }

    #[test]
    fn t2star_mae_examples() {
        let r = [40.0, 50.0, 60.0];
        let e = [true, true, false];
        assert_eq!(t2star_mae(&r, &r, &e).unwrap(), 0.0);
        let plus: Vec<f64> = r.iter().map(|v| v + 5.0).collect();
        assert_eq!(t2star_mae(&plus, &r, &e).unwrap(), 5.0);
        assert!(t2star_mae(&r, &r, &[false; 3]).is_err());
        let em = evaluation_mask(&[true; 3], &[50.0, 150.0, 99.0], &[true; 3], &[true, true, false], 100.0).unwrap();
        assert_eq!(em, vec![true, false, false]);
    }

    /// Direct 2-D window evaluation, written independently of the separable
    /// implementation.
    fn ssim_bruteforce(a: &[f64], b: &[f64], h: usize, w: usize, eval: &[bool]) -> f64 {
        let range = b.iter().zip(eval).filter(|(_, e)| **e).map(|(v, _)| *v).fold(f64::MIN, f64::max);
        let za: Vec<f64> = a.iter().zip(eval).map(|(v, e)| if *e { *v } else { 0.0 }).collect();
        let zb: Vec<f64> = b.iter().zip(eval).map(|(v, e)| if *e { *v } else { 0.0 }).collect();
        let mut win = [[0.0; 7]; 7];
        let mut total = 0.0;
        for (i, row) in win.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (di, dj) = (i as f64 - 3.0, j as f64 - 3.0);
                *v = (-(di * di + dj * dj) / 4.5).exp();
                total += *v;
            }
        }
        let (c1, c2) = ((0.01 * range).powi(2), (0.03 * range).powi(2));
        let mut vals = Vec::new();
        for y in 3..h - 3 {
            for x in 3..w - 3 {
                if !eval[y * w + x] {
                    continue;
                }
                let mut m = [0.0; 5];
                for i in 0..7 {
                    for j in 0..7 {
                        let k = (y + i - 3) * w + (x + j - 3);
                        let g = win[i][j] / total;
                        m[0] += g * za[k];
                        m[1] += g * zb[k];
                        m[2] += g * za[k] * za[k];
                        m[3] += g * zb[k] * zb[k];
                        m[4] += g * za[k] * zb[k];
                    }
                }
                let (vx, vy, cxy) = (m[2] - m[0] * m[0], m[3] - m[1] * m[1], m[4] - m[0] * m[1]);
                vals.push(((2.0 * m[0] * m[1] + c1) * (2.0 * cxy + c2)) / ((m[0] * m[0] + m[1] * m[1] + c1) * (vx + vy + c2)));
            }
        }
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    #[test]
    fn ssim_matches_bruteforce_on_random_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..5 {
            let a: Vec<f64> = (0..1024).map(|_| rng.random_range(0.0..200.0)).collect();
            let b: Vec<f64> = (0..1024).map(|_| rng.random_range(0.0..200.0)).collect();
            let eval: Vec<bool> = (0..1024).map(|_| rng.random_range(0.0..1.0) < 0.8).collect();
            let got = ssim(&a, &b, 32, 32, &eval).unwrap();
            let want = ssim_bruteforce(&a, &b, 32, 32, &eval);
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn ssim_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let a: Vec<f64> = (0..400).map(|_| rng.random_range(20.0..80.0)).collect();
        let all = vec![true; 400];
        assert!((ssim(&a, &a, 20, 20, &all).unwrap() - 1.0).abs() < 1e-12);
        let big: Vec<f64> = a.iter().map(|v| v * 1000.0).collect();
        assert!(ssim(&big, &a, 20, 20, &all).unwrap() < 1.0);
        assert!(ssim(&a, &a, 20, 20, &[false; 400]).is_err());
    }

    proptest! {
        #[test]
        fn accuracy_is_permutation_invariant(
            pairs in proptest::collection::vec((0.0f64..1.0, proptest::bool::ANY), 1..60),
            seed in 0u64..1000,
        ) {
            let pred: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let reference: Vec<f64> = pairs.iter().map(|p| p.1 as u8 as f64).collect();
            let mut idx: Vec<usize> = (0..pred.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::SliceRandom::shuffle(&mut idx[..], &mut rng);
            let pp: Vec<f64> = idx.iter().map(|i| pred[*i]).collect();
            let rp: Vec<f64> = idx.iter().map(|i| reference[*i]).collect();
            prop_assert_eq!(mask_accuracy(&pred, &reference, 0.5).unwrap(), mask_accuracy(&pp, &rp, 0.5).unwrap());
        }

        #[test]
        fn binary_mae_zero_iff_equal(
            pairs in proptest::collection::vec((proptest::bool::ANY, proptest::bool::ANY), 1..60),
        ) {
            let a: Vec<f64> = pairs.iter().map(|p| p.0 as u8 as f64).collect();
            let b: Vec<f64> = pairs.iter().map(|p| p.1 as u8 as f64).collect();
            prop_assert_eq!(mask_mae(&a, &b).unwrap() == 0.0, a == b);
        }

        #[test]
        fn perfect_pr_point_iff_perfect_prediction(
            pairs in proptest::collection::vec((0.0f64..1.0, proptest::bool::ANY), 1..40),
        ) {
            let pred: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let reference: Vec<f64> = pairs.iter().map(|p| p.1 as u8 as f64).collect();
            let c = pr_curve(&pred, &reference, 101).unwrap();
            let perfect_point = c.precision.iter().zip(&c.recall).any(|(p, r)| *p == 1.0 && *r == 1.0);
            let separable = c.thresholds.iter().any(|t| {
                pred.iter().zip(&reference).all(|(p, r)| ((1.0 - p) >= *t) == (*r < 0.5))
            });
            prop_assert_eq!(perfect_point, separable);
        }

        #[test]
        fn ssim_is_symmetric_with_fixed_range(
            a in proptest::collection::vec(0.0f64..100.0, 144),
            b in proptest::collection::vec(0.0f64..100.0, 144),
        ) {
            let eval = vec![true; 144];
            let x = ssim_with_range(&a, &b, 12, 12, &eval, 100.0).unwrap();
            let y = ssim_with_range(&b, &a, 12, 12, &eval, 100.0).unwrap();
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}
