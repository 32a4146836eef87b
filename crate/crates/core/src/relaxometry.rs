//! Mono-exponential decay model, log-linear T2* fitting and the
//! correlation-based physics loss.
//!
//! Per-voxel echo series are laid out voxel-major: `values[v * n_echoes + e]`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ImageStack, MapDims, ParameterMaps};

pub const DEFAULT_T2STAR_MAX_MS: f64 = 2000.0;
/// Magnitude floor relative to the per-volume maximum.
pub const DEFAULT_FLOOR_FRACTION: f64 = 1e-6;

/// `s0 * exp(-TE / T2*)` at each echo time.
pub fn evaluate_decay(s0: f64, t2star_ms: f64, echo_times_ms: &[f64]) -> Result<Vec<f64>> {
    if !(t2star_ms > 0.0) || !t2star_ms.is_finite() {
        return Err(Error::InvalidArgument(format!("T2* must be positive and finite, got {t2star_ms}")));
    }
    if !(s0 >= 0.0) {
        return Err(Error::InvalidArgument(format!("s0 must be non-negative, got {s0}")));
    }
    Ok(echo_times_ms.iter().map(|te| decay(s0, t2star_ms, *te)).collect())
}

#[inline]
fn decay(s0: f64, t2star_ms: f64, te: f64) -> f64 {
    s0 * (-te / t2star_ms).exp()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecayFit {
    pub s0: f64,
    pub t2star_ms: f64,
    /// False when the fitted decay rate was not positive; `t2star_ms` is then
    /// clamped to the configured maximum.
    pub valid: bool,
    pub fitted: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitOptions {
    pub t2star_max_ms: f64,
    /// Floor relative to the per-volume maximum magnitude.
    pub floor_fraction: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            t2star_max_ms: DEFAULT_T2STAR_MAX_MS,
            floor_fraction: DEFAULT_FLOOR_FRACTION,
        }
    }
}

/// Ordinary least squares of `log(max(s, eps))` on the design `[1, -TE]`,
/// precomputed for a fixed set of echo times.
#[derive(Clone, Debug)]
pub struct LogLinearFitter {
    echo_times_ms: Vec<f64>,
    /// Rows of the pseudo-inverse: intercept = hat_intercept · z, rate = hat_rate · z.
    hat_intercept: Vec<f64>,
    hat_rate: Vec<f64>,
    t2star_max_ms: f64,
}

/// Intermediate state of one fit, kept for differentiation.
struct FitState {
    intercept: f64,
    rate: f64,
    clamped: bool,
}

impl LogLinearFitter {
    pub fn new(echo_times_ms: &[f64], t2star_max_ms: f64) -> Result<Self> {
        if echo_times_ms.len() < 3 {
            return Err(Error::InvalidArgument(format!(
                "fitting needs at least 3 echoes, got {}",
                echo_times_ms.len()
            )));
        }
        if !(t2star_max_ms > 0.0) {
            return Err(Error::InvalidArgument("t2star_max_ms must be positive".into()));
        }
        let n = echo_times_ms.len() as f64;
        let xs: Vec<f64> = echo_times_ms.iter().map(|te| -te).collect();
        let sx: f64 = xs.iter().sum();
        let sxx: f64 = xs.iter().map(|x| x * x).sum();
        let det = n * sxx - sx * sx;
        if !(det.abs() > 0.0) {
            return Err(Error::InvalidArgument("echo times must not all be equal".into()));
        }
        Ok(LogLinearFitter {
            echo_times_ms: echo_times_ms.to_vec(),
            hat_intercept: xs.iter().map(|x| (sxx - sx * x) / det).collect(),
            hat_rate: xs.iter().map(|x| (n * x - sx) / det).collect(),
            t2star_max_ms,
        })
    }

    pub fn n_echoes(&self) -> usize {
        self.echo_times_ms.len()
    }

    pub fn echo_times_ms(&self) -> &[f64] {
        &self.echo_times_ms
    }

    fn state(&self, signals: &[f64], floor_eps: f64) -> FitState {
        let mut intercept = 0.0;
        let mut rate = 0.0;
        for ((s, ha), hb) in signals.iter().zip(&self.hat_intercept).zip(&self.hat_rate) {
            let z = s.max(floor_eps).ln();
            intercept += ha * z;
            rate += hb * z;
        }
        // slower than the maximum counts as non-decaying
        if rate > 1.0 / self.t2star_max_ms {
            FitState {
                intercept,
                rate,
                clamped: false,
            }
        } else {
            FitState {
                intercept,
                rate: 1.0 / self.t2star_max_ms,
                clamped: true,
            }
        }
    }

    /// Fits one voxel, writing the fitted intensities into `fitted`.
    /// Returns `(s0, t2star_ms, valid)`.
    pub fn fit_into(&self, signals: &[f64], floor_eps: f64, fitted: &mut [f64]) -> (f64, f64, bool) {
        let st = self.state(signals, floor_eps);
        let (s0, t2) = self.params(&st);
        for (f, te) in fitted.iter_mut().zip(&self.echo_times_ms) {
            *f = decay(s0, t2, *te);
        }
        (s0, t2, !st.clamped)
    }

    fn params(&self, st: &FitState) -> (f64, f64) {
        let t2 = if st.clamped { self.t2star_max_ms } else { 1.0 / st.rate };
        (st.intercept.exp(), t2)
    }

    pub fn fit(&self, signals: &[f64], floor_eps: f64) -> Result<DecayFit> {
        if signals.len() != self.n_echoes() {
            return Err(Error::Shape(format!(
                "expected {} echoes, got {}",
                self.n_echoes(),
                signals.len()
            )));
        }
        if signals.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument("signals must be finite".into()));
        }
        if !(floor_eps > 0.0) {
            return Err(Error::InvalidArgument("floor_eps must be positive".into()));
        }
        let mut fitted = vec![0.0; self.n_echoes()];
        let (s0, t2star_ms, valid) = self.fit_into(signals, floor_eps, &mut fitted);
        Ok(DecayFit {
            s0,
            t2star_ms,
            valid,
            fitted,
        })
    }

    /// Voxel loss `1 - corr(s, fit(s))` and its exact derivative with respect
    /// to `signals`, differentiating through the refit. Signals at or below
    /// the floor have zero derivative through the fit.
    pub fn refit_loss_and_gradient(&self, signals: &[f64], floor_eps: f64, grad: &mut [f64]) -> f64 {
        let e = self.n_echoes();
        let st = self.state(signals, floor_eps);
        let (s0, t2) = self.params(&st);
        let mut fitted = [0.0f64; 64];
        let mut scratch;
        let fitted: &mut [f64] = if e <= 64 {
            &mut fitted[..e]
        } else {
            scratch = vec![0.0; e];
            &mut scratch
        };
        for (f, te) in fitted.iter_mut().zip(&self.echo_times_ms) {
            *f = decay(s0, t2, *te);
        }
        let fitted: &[f64] = fitted;
        let Some(corr) = Correlation::new(signals, fitted) else {
            grad.iter_mut().for_each(|g| *g = 0.0);
            return 1.0;
        };
        // dr/df_e contracted with df_e/d(intercept) and df_e/d(rate)
        let mut p = 0.0;
        let mut q = 0.0;
        for (k, (f, te)) in fitted.iter().zip(&self.echo_times_ms).enumerate() {
            let dr_df = corr.d_wrt_second(k);
            p += dr_df * f;
            q += dr_df * f * te;
        }
        for k in 0..e {
            let mut dr = corr.d_wrt_first(k);
            if signals[k] > floor_eps {
                let through_fit = if st.clamped {
                    self.hat_intercept[k] * p
                } else {
                    self.hat_intercept[k] * p - self.hat_rate[k] * q
                };
                dr += through_fit / signals[k];
            }
            grad[k] = -dr;
        }
        1.0 - corr.r
    }
}

/// Pearson correlation of two equal-length vectors with its partial derivatives.
struct Correlation<'a> {
    r: f64,
    norm: f64,
    saa: f64,
    sbb: f64,
    mean_a: f64,
    mean_b: f64,
    a: &'a [f64],
    b: &'a [f64],
}

impl<'a> Correlation<'a> {
    /// `None` when either vector has (numerically) zero variance.
    fn new(a: &'a [f64], b: &'a [f64]) -> Option<Self> {
        let n = a.len() as f64;
        let mean_a = a.iter().sum::<f64>() / n;
        let mean_b = b.iter().sum::<f64>() / n;
        let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
        let (mut qa, mut qb) = (0.0, 0.0);
        for (x, y) in a.iter().zip(b) {
            let (da, db) = (x - mean_a, y - mean_b);
            saa += da * da;
            sbb += db * db;
            sab += da * db;
            qa += x * x;
            qb += y * y;
        }
        const REL_TINY: f64 = 1e-24;
        if !(saa > REL_TINY * qa) || !(sbb > REL_TINY * qb) {
            return None;
        }
        let norm = (saa * sbb).sqrt();
        Some(Correlation {
            r: (sab / norm).clamp(-1.0, 1.0),
            norm,
            saa,
            sbb,
            mean_a,
            mean_b,
            a,
            b,
        })
    }

    fn d_wrt_first(&self, k: usize) -> f64 {
        let (ak, bk) = (self.a[k] - self.mean_a, self.b[k] - self.mean_b);
        bk / self.norm - self.r * ak / self.saa
    }

    fn d_wrt_second(&self, k: usize) -> f64 {
        let (ak, bk) = (self.a[k] - self.mean_a, self.b[k] - self.mean_b);
        ak / self.norm - self.r * bk / self.sbb
    }
}

pub fn fit_monoexp(signals: &[f64], echo_times_ms: &[f64], floor_eps: f64) -> Result<DecayFit> {
    fit_monoexp_with(signals, echo_times_ms, floor_eps, DEFAULT_T2STAR_MAX_MS)
}

pub fn fit_monoexp_with(
    signals: &[f64],
    echo_times_ms: &[f64],
    floor_eps: f64,
    t2star_max_ms: f64,
) -> Result<DecayFit> {
    LogLinearFitter::new(echo_times_ms, t2star_max_ms)?.fit(signals, floor_eps)
}

/// `1 - corr(rec, fit)` for one voxel; zero-variance inputs give 1.
pub fn voxel_loss(rec: &[f64], fit: &[f64]) -> f64 {
    Correlation::new(rec, fit).map_or(1.0, |c| 1.0 - c.r)
}

fn check_series(recon: &[f64], fitted: &[f64], n_echoes: usize, roi: &[bool]) -> Result<usize> {
    if n_echoes == 0 || recon.len() != roi.len() * n_echoes || fitted.len() != recon.len() {
        return Err(Error::Shape(format!(
            "series of {} / {} values do not match {} voxels x {} echoes",
            recon.len(),
            fitted.len(),
            roi.len(),
            n_echoes
        )));
    }
    let count = roi.iter().filter(|b| **b).count();
    if count == 0 {
        return Err(Error::EmptyRegion("physics loss needs a nonempty roi".into()));
    }
    Ok(count)
}

/// Mean voxel loss over `roi`. Result lies in `[0, 2]`.
pub fn physics_loss(recon_mags: &[f64], fitted: &[f64], n_echoes: usize, roi: &[bool]) -> Result<f64> {
    let count = check_series(recon_mags, fitted, n_echoes, roi)?;
    let total: f64 = recon_mags
        .chunks_exact(n_echoes)
        .zip(fitted.chunks_exact(n_echoes))
        .zip(roi)
        .filter(|(_, inside)| **inside)
        .map(|((r, f), _)| voxel_loss(r, f))
        .sum();
    Ok(total / count as f64)
}

/// Gradient of [`physics_loss`] with respect to the reconstructed magnitudes,
/// holding the fitted intensities fixed.
pub fn physics_loss_gradient(recon_mags: &[f64], fitted: &[f64], n_echoes: usize, roi: &[bool]) -> Result<Vec<f64>> {
    let count = check_series(recon_mags, fitted, n_echoes, roi)? as f64;
    let mut grad = vec![0.0; recon_mags.len()];
    for (((g, r), f), inside) in grad
        .chunks_exact_mut(n_echoes)
        .zip(recon_mags.chunks_exact(n_echoes))
        .zip(fitted.chunks_exact(n_echoes))
        .zip(roi)
    {
        if !*inside {
            continue;
        }
        if let Some(c) = Correlation::new(r, f) {
            for (k, gk) in g.iter_mut().enumerate() {
                *gk = -c.d_wrt_first(k) / count;
            }
        }
    }
    Ok(grad)
}

/// Gradient of the mean loss `1 - corr(s, fit(s))` over `roi`, including the
/// dependence of the fit on the signals.
pub fn physics_loss_gradient_refit(
    recon_mags: &[f64],
    fitter: &LogLinearFitter,
    floor_eps: f64,
    roi: &[bool],
) -> Result<(f64, Vec<f64>)> {
    let e = fitter.n_echoes();
    let count = check_series(recon_mags, recon_mags, e, roi)? as f64;
    let mut grad = vec![0.0; recon_mags.len()];
    let mut total = 0.0;
    for ((g, r), inside) in grad.chunks_exact_mut(e).zip(recon_mags.chunks_exact(e)).zip(roi) {
        if *inside {
            total += fitter.refit_loss_and_gradient(r, floor_eps, g);
            g.iter_mut().for_each(|v| *v /= count);
        }
    }
    Ok((total / count, grad))
}

/// Voxel-major magnitudes of one `[echo, h, w]` complex slice.
pub fn voxel_major_magnitudes(slice: &[crate::model::C64], n_echoes: usize) -> Vec<f64> {
    let plane = slice.len() / n_echoes;
    let mut out = vec![0.0; slice.len()];
    for e in 0..n_echoes {
        for v in 0..plane {
            out[v * n_echoes + e] = slice[e * plane + v].norm();
        }
    }
    out
}

/// Fits every voxel of every slice. The magnitude floor is
/// `floor_fraction` times the maximum magnitude of the whole volume.
pub fn fit_images(images: &ImageStack, options: &FitOptions) -> Result<ParameterMaps> {
    let d = images.dims();
    let fitter = LogLinearFitter::new(images.echo_times_ms(), options.t2star_max_ms)?;
    let max_mag = images.values().iter().map(|v| v.norm()).fold(0.0, f64::max);
    let floor = if max_mag > 0.0 {
        options.floor_fraction * max_mag
    } else {
        f64::MIN_POSITIVE
    };
    if images.values().iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::InvalidArgument("images must be finite".into()));
    }

    let per_slice: Vec<(Vec<f64>, Vec<f64>, Vec<bool>)> = (0..d.slices)
        .into_par_iter()
        .map(|s| {
            let mags = voxel_major_magnitudes(images.slice(s), d.echoes);
            let mut fitted = vec![0.0; d.echoes];
            let mut t2 = Vec::with_capacity(d.plane());
            let mut s0 = Vec::with_capacity(d.plane());
            let mut valid = Vec::with_capacity(d.plane());
            for series in mags.chunks_exact(d.echoes) {
                let (a, t, ok) = fitter.fit_into(series, floor, &mut fitted);
                s0.push(a);
                t2.push(t);
                valid.push(ok);
            }
            (t2, s0, valid)
        })
        .collect();

    let mut t2 = Vec::with_capacity(d.slices * d.plane());
    let mut s0 = Vec::with_capacity(d.slices * d.plane());
    let mut valid = Vec::with_capacity(d.slices * d.plane());
    for (a, b, c) in per_slice {
        t2.extend(a);
        s0.extend(b);
        valid.extend(c);
    }
    ParameterMaps::new(
        MapDims {
            slices: d.slices,
            h: d.h,
            w: d.w,
        },
        t2,
        s0,
        valid,
    )
}
