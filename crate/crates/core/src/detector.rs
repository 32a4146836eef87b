//! Self-supervised estimation of per-line exclusion masks by minimizing the
//! physics loss of a mask-weighted reconstruction plus a line-count
//! regularizer.
//!
//! Inside the optimization loop the reconstruction is the weighted adjoint,
//! which is linear in the mask. The loss gradient is chained through it in
//! the hybrid `(pe, x)` space: with `z_ec` the readout-inverse-transformed
//! k-space of echo `e` and coil `c`,
//! `x_e = sum_c conj(C_c) F_y^H (m ⊙ z_ec)` and
//! `dL/dm_y = Re sum_{e,c,x} conj(F_y(C_c g_e))[y, x] z_ec[y, x]`
//! where `g_e` is the complex image-space gradient.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoding::{keep_center_weights, SliceEncoder};
use crate::error::{Error, Result};
use crate::model::{CoilSensitivities, FieldMap, GroupId, KSpaceData, MapDims, VolumeMask, C64};
use crate::phantom::GAMMA_HZ_PER_T;
use crate::relaxometry::{physics_loss_gradient, voxel_loss, LogLinearFitter, DEFAULT_FLOOR_FRACTION, DEFAULT_T2STAR_MAX_MS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    EvenOdd,
    PerSlice,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// Differentiates through the per-voxel refit.
    Exact,
    /// Treats the fitted curves as constants.
    FrozenFit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceOrder {
    Inferior,
    Superior,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SliceSelect {
    pub max_gradient_ut_per_m: f64,
    pub n_slices: usize,
    pub take: SliceOrder,
}

impl Default for SliceSelect {
    fn default() -> Self {
        SliceSelect {
            max_gradient_ut_per_m: 80.0,
            n_slices: 8,
            take: SliceOrder::Inferior,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub lambda_reg: f64,
    pub batch_slices: usize,
    pub center_width: usize,
    pub center_weight: f64,
    pub slice_select: SliceSelect,
    pub grouping: Grouping,
    pub keep_center: bool,
    pub gradient: GradientMode,
    pub gamma_hz_per_t: f64,
    pub floor_fraction: f64,
    pub t2star_max_ms: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            iterations: 100,
            learning_rate: 0.01,
            lambda_reg: 0.005,
            batch_slices: 20,
            center_width: 10,
            center_weight: 2.0,
            slice_select: SliceSelect::default(),
            grouping: Grouping::EvenOdd,
            keep_center: true,
            gradient: GradientMode::Exact,
            gamma_hz_per_t: GAMMA_HZ_PER_T,
            floor_fraction: DEFAULT_FLOOR_FRACTION,
            t2star_max_ms: DEFAULT_T2STAR_MAX_MS,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("center_weight", self.center_weight),
            ("gamma_hz_per_t", self.gamma_hz_per_t),
            ("floor_fraction", self.floor_fraction),
            ("t2star_max_ms", self.t2star_max_ms),
            ("slice_select.max_gradient_ut_per_m", self.slice_select.max_gradient_ut_per_m),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invariant(name, "must be positive and finite"));
            }
        }
        if !(self.lambda_reg >= 0.0) || !self.lambda_reg.is_finite() {
            return Err(Error::invariant("lambda_reg", "must be non-negative and finite"));
        }
        if self.batch_slices == 0 || self.slice_select.n_slices == 0 {
            return Err(Error::invariant("batch_slices", "slice counts must be positive"));
        }
        if self.center_width == 0 || self.center_width % 2 != 0 {
            return Err(Error::invariant("center_width", "must be positive and even"));
        }
        Ok(())
    }
}

/// Half-open range of central lines weighted by the regularizer.
pub fn center_band(y: usize, center_width: usize) -> std::ops::Range<usize> {
    y / 2 - center_width / 2..y / 2 + center_width / 2
}

/// `(1 - mean(m)) + w_c * (1 - mean(m over the central band))`.
pub fn reg_loss(mask: &[f64], center_width: usize, center_weight: f64) -> Result<f64> {
    let y = mask.len();
    if y < center_width || center_width == 0 {
        return Err(Error::InvalidArgument(format!(
            "mask of {y} lines is shorter than the central band of {center_width}"
        )));
    }
    let mean = mask.iter().sum::<f64>() / y as f64;
    let band = center_band(y, center_width);
    let center = mask[band].iter().sum::<f64>() / center_width as f64;
    Ok((1.0 - mean) + center_weight * (1.0 - center))
}

pub fn reg_gradient(y: usize, center_width: usize, center_weight: f64) -> Vec<f64> {
    let band = center_band(y, center_width);
    (0..y)
        .map(|i| -1.0 / y as f64 - if band.contains(&i) { center_weight / center_width as f64 } else { 0.0 })
        .collect()
}

/// `1` where `weight >= threshold`, else `0`.
pub fn binarize(mask: &[f64], threshold: f64) -> Vec<f64> {
    mask.iter().map(|w| if *w >= threshold { 1.0 } else { 0.0 }).collect()
}

/// In-plane B0 gradient magnitude in μT/m. Differences use only voxels
/// inside `support`: central where both neighbours are inside, one-sided
/// where one is, zero where none is. Zero outside `support`.
pub fn susceptibility_gradient_map(
    field: &FieldMap,
    support: &VolumeMask,
    voxel_size_mm: [f64; 3],
    gamma_hz_per_t: f64,
) -> Result<Vec<f64>> {
    let d = field.dims();
    if support.dims() != d {
        return Err(Error::Shape("support does not match the field map".into()));
    }
    if field.omega().iter().any(|v| !v.is_finite()) {
        return Err(Error::invariant("omega", "field must be finite"));
    }
    let to_ut = 1e9 / (2.0 * std::f64::consts::PI * gamma_hz_per_t);
    let (dy, dx) = (voxel_size_mm[0] * 1e-3, voxel_size_mm[1] * 1e-3);
    let mut out = vec![0.0; d.len()];
    for s in 0..d.slices {
        let om = field.slice(s);
        let inside = support.slice(s);
        let dst = &mut out[s * d.plane()..(s + 1) * d.plane()];
        let diff = |a: Option<usize>, c: usize, b: Option<usize>, step: f64| -> f64 {
            let ok = |i: Option<usize>| i.filter(|i| inside[*i]);
            match (ok(a), ok(b)) {
                (Some(a), Some(b)) => (om[b] - om[a]) * to_ut / (2.0 * step),
                (Some(a), None) => (om[c] - om[a]) * to_ut / step,
                (None, Some(b)) => (om[b] - om[c]) * to_ut / step,
                (None, None) => 0.0,
            }
        };
        for y in 0..d.h {
            for x in 0..d.w {
                let c = y * d.w + x;
                if !inside[c] {
                    continue;
                }
                let up = (y > 0).then(|| c - d.w);
                let down = (y + 1 < d.h).then(|| c + d.w);
                let left = (x > 0).then(|| c - 1);
                let right = (x + 1 < d.w).then(|| c + 1);
                let gy = diff(up, c, down, dy);
                let gx = diff(left, c, right, dx);
                dst[c] = (gx * gx + gy * gy).sqrt();
            }
        }
    }
    Ok(out)
}

/// Slices whose roi-mean gradient is below the threshold, the
/// `n_slices` most inferior (lowest index) first.
pub fn select_slices(gradient_map: &[f64], roi: &VolumeMask, select: &SliceSelect) -> Result<Vec<usize>> {
    let d = roi.dims();
    if gradient_map.len() != d.len() {
        return Err(Error::Shape("gradient map does not match the roi".into()));
    }
    let mut qualifying = Vec::new();
    for s in 0..d.slices {
        let g = &gradient_map[s * d.plane()..(s + 1) * d.plane()];
        let (sum, n) = g
            .iter()
            .zip(roi.slice(s))
            .filter(|(_, m)| **m)
            .fold((0.0, 0usize), |(a, n), (v, _)| (a + v, n + 1));
        if n > 0 && sum / (n as f64) < select.max_gradient_ut_per_m {
            qualifying.push(s);
        }
    }
    if select.take == SliceOrder::Superior {
        qualifying.reverse();
    }
    qualifying.truncate(select.n_slices);
    if qualifying.is_empty() {
        return Err(Error::EmptyRegion(format!(
            "no slice has a mean susceptibility gradient below {} uT/m",
            select.max_gradient_ut_per_m
        )));
    }
    if qualifying.len() < select.n_slices {
        log::warn!("only {} of {} requested slices qualify: {:?}", qualifying.len(), select.n_slices, qualifying);
    }
    qualifying.sort_unstable();
    Ok(qualifying)
}

/// Mask group of each slice under a grouping.
pub fn group_of(grouping: Grouping, slice: usize) -> GroupId {
    match grouping {
        Grouping::EvenOdd if slice % 2 == 0 => GroupId::Even,
        Grouping::EvenOdd => GroupId::Odd,
        Grouping::PerSlice => GroupId::Slice(slice),
    }
}

struct SliceTerm {
    slice: usize,
    group: usize,
    /// Hybrid-space data `[echo, coil, pe, x]`.
    hybrid: Vec<C64>,
    coils: Vec<Vec<C64>>,
    roi: Vec<bool>,
    roi_count: usize,
}

/// The objective of one detection run, with precomputed per-slice data.
pub struct DetectorProblem {
    config: DetectorConfig,
    encoder: SliceEncoder,
    groups: Vec<GroupId>,
    terms: Vec<SliceTerm>,
    fitter: LogLinearFitter,
    floor_eps: f64,
    n_echoes: usize,
    n_pe: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveValue {
    pub physics: f64,
    pub reg: f64,
    pub total: f64,
}

impl DetectorProblem {
    /// `slices` are the slices entering the physics term. Under `even_odd`
    /// the two groups are even and odd; under `per_slice` every slice of
    /// the volume has its own group.
    pub fn new(
        kspace: &KSpaceData,
        coils: &CoilSensitivities,
        roi: &VolumeMask,
        slices: &[usize],
        config: &DetectorConfig,
    ) -> Result<Self> {
        config.validate()?;
        let d = kspace.dims();
        if coils.coils() != d.coils || coils.dims() != (MapDims { slices: d.slices, h: d.pe, w: d.ro }) {
            return Err(Error::Shape("coil maps do not match k-space".into()));
        }
        if roi.dims() != coils.dims() {
            return Err(Error::Shape("roi does not match k-space".into()));
        }
        if d.pe < config.center_width {
            return Err(Error::InvalidArgument("fewer PE lines than the central band".into()));
        }
        if slices.is_empty() || slices.iter().any(|s| *s >= d.slices) {
            return Err(Error::InvalidArgument(format!("invalid slice selection {slices:?}")));
        }
        let mut slices = slices.to_vec();
        slices.sort_unstable();
        slices.dedup();
        if slices.len() > config.batch_slices {
            slices.truncate(config.batch_slices);
        }

        let groups: Vec<GroupId> = match config.grouping {
            Grouping::EvenOdd => vec![GroupId::Even, GroupId::Odd],
            Grouping::PerSlice => (0..d.slices).map(GroupId::Slice).collect(),
        };
        let vox = kspace.voxel_size_mm();
        let encoder = SliceEncoder::new(d.pe, d.ro, [vox[0], vox[1]]);
        let mut terms = Vec::with_capacity(slices.len());
        for &s in &slices {
            let gid = group_of(config.grouping, s);
            let group = groups.iter().position(|g| *g == gid).expect("group exists");
            let mask = roi.slice(s).to_vec();
            let roi_count = mask.iter().filter(|m| **m).count();
            if roi_count == 0 {
                return Err(Error::EmptyRegion(format!("roi of slice {s} is empty")));
            }
            terms.push(SliceTerm {
                slice: s,
                group,
                hybrid: encoder.to_hybrid(kspace.slice(s)),
                coils: (0..d.coils).map(|c| coils.map(c, s).to_vec()).collect(),
                roi: mask,
                roi_count,
            });
        }

        // magnitude floor from the full-mask reconstruction, fixed for the run
        let ones = vec![1.0; d.pe];
        let max_mag = terms
            .iter()
            .map(|t| {
                let cref: Vec<&[C64]> = t.coils.iter().map(|c| c.as_slice()).collect();
                encoder
                    .adjoint_hybrid(&t.hybrid, d.echoes, &ones, &cref)
                    .iter()
                    .fold(0.0f64, |a, v| a.max(v.norm()))
            })
            .fold(0.0f64, f64::max);
        let floor_eps = if max_mag > 0.0 { config.floor_fraction * max_mag } else { f64::MIN_POSITIVE };

        Ok(DetectorProblem {
            config: *config,
            encoder,
            groups,
            terms,
            fitter: LogLinearFitter::new(kspace.echo_times_ms(), config.t2star_max_ms)?,
            floor_eps,
            n_echoes: d.echoes,
            n_pe: d.pe,
        })
    }

    /// Selects slices from the field map and builds the problem. `per_slice`
    /// grouping uses every slice.
    pub fn from_field(
        kspace: &KSpaceData,
        coils: &CoilSensitivities,
        field: &FieldMap,
        roi: &VolumeMask,
        config: &DetectorConfig,
    ) -> Result<Self> {
        let slices = match config.grouping {
            Grouping::EvenOdd => {
                let g = susceptibility_gradient_map(field, roi, kspace.voxel_size_mm(), config.gamma_hz_per_t)?;
                select_slices(&g, roi, &config.slice_select)?
            }
            Grouping::PerSlice => (0..kspace.dims().slices).collect(),
        };
        DetectorProblem::new(kspace, coils, roi, &slices, config)
    }

    pub fn groups(&self) -> &[GroupId] {
        &self.groups
    }

    pub fn slices(&self) -> Vec<usize> {
        self.terms.iter().map(|t| t.slice).collect()
    }

    pub fn n_pe(&self) -> usize {
        self.n_pe
    }

    pub fn floor_eps(&self) -> f64 {
        self.floor_eps
    }

    fn check_masks(&self, masks: &[Vec<f64>]) -> Result<()> {
        if masks.len() != self.groups.len() || masks.iter().any(|m| m.len() != self.n_pe) {
            return Err(Error::Shape(format!(
                "expected {} masks of {} lines",
                self.groups.len(),
                self.n_pe
            )));
        }
        Ok(())
    }

    fn effective(&self, mask: &[f64]) -> Vec<f64> {
        let mut m = mask.to_vec();
        if self.config.keep_center {
            keep_center_weights(&mut m).expect("even PE count checked at construction");
        }
        m
    }

    fn reconstruct(&self, term: &SliceTerm, mask: &[f64]) -> Vec<C64> {
        let cref: Vec<&[C64]> = term.coils.iter().map(|c| c.as_slice()).collect();
        self.encoder.adjoint_hybrid(&term.hybrid, self.n_echoes, mask, &cref)
    }

    /// Voxel-major magnitudes of roi voxels and their plane indices.
    fn roi_magnitudes(&self, term: &SliceTerm, recon: &[C64]) -> (Vec<f64>, Vec<usize>) {
        let plane = self.encoder.plane();
        let e = self.n_echoes;
        let idx: Vec<usize> = (0..plane).filter(|v| term.roi[*v]).collect();
        let mut mags = vec![0.0; idx.len() * e];
        for (k, v) in idx.iter().enumerate() {
            for echo in 0..e {
                mags[k * e + echo] = recon[echo * plane + v].norm();
            }
        }
        (mags, idx)
    }

    fn slice_loss(&self, term: &SliceTerm, mask: &[f64]) -> f64 {
        let recon = self.reconstruct(term, mask);
        let (mags, _) = self.roi_magnitudes(term, &recon);
        let mut fitted = vec![0.0; self.n_echoes];
        let total: f64 = mags
            .chunks_exact(self.n_echoes)
            .map(|s| {
                self.fitter.fit_into(s, self.floor_eps, &mut fitted);
                voxel_loss(s, &fitted)
            })
            .sum();
        total / term.roi_count as f64
    }

    fn slice_loss_and_gradient(&self, term: &SliceTerm, mask: &[f64]) -> (f64, Vec<f64>) {
        let plane = self.encoder.plane();
        let (e_count, w) = (self.n_echoes, self.encoder.w());
        let recon = self.reconstruct(term, mask);
        let (mags, idx) = self.roi_magnitudes(term, &recon);

        let (loss, grad_mag) = match self.config.gradient {
            GradientMode::Exact => {
                let mut g = vec![0.0; mags.len()];
                let mut total = 0.0;
                for (s, gv) in mags.chunks_exact(e_count).zip(g.chunks_exact_mut(e_count)) {
                    total += self.fitter.refit_loss_and_gradient(s, self.floor_eps, gv);
                }
                let n = term.roi_count as f64;
                g.iter_mut().for_each(|v| *v /= n);
                (total / n, g)
            }
            GradientMode::FrozenFit => {
                let mut fitted = vec![0.0; mags.len()];
                for (s, f) in mags.chunks_exact(e_count).zip(fitted.chunks_exact_mut(e_count)) {
                    self.fitter.fit_into(s, self.floor_eps, f);
                }
                let all = vec![true; idx.len()];
                let g = physics_loss_gradient(&mags, &fitted, e_count, &all).expect("consistent shapes");
                let loss = mags
                    .chunks_exact(e_count)
                    .zip(fitted.chunks_exact(e_count))
                    .map(|(s, f)| voxel_loss(s, f))
                    .sum::<f64>()
                    / term.roi_count as f64;
                (loss, g)
            }
        };

        // complex image-space gradient g_e = dL/d|x_e| * x_e / |x_e|
        let mut img_grad = vec![C64::new(0.0, 0.0); e_count * plane];
        for (k, v) in idx.iter().enumerate() {
            for echo in 0..e_count {
                let x = recon[echo * plane + v];
                let m = x.norm();
                if m > 0.0 {
                    img_grad[echo * plane + v] = x * (grad_mag[k * e_count + echo] / m);
                }
            }
        }

        let n_c = term.coils.len();
        let mut grad = vec![0.0; self.n_pe];
        let mut buf = vec![C64::new(0.0, 0.0); plane];
        for echo in 0..e_count {
            let g_e = &img_grad[echo * plane..(echo + 1) * plane];
            for (c, coil) in term.coils.iter().enumerate() {
                for ((b, g), s) in buf.iter_mut().zip(g_e).zip(coil) {
                    *b = g * s;
                }
                self.encoder.fft().cols(&mut buf, false);
                let z = &term.hybrid[(echo * n_c + c) * plane..(echo * n_c + c + 1) * plane];
                for (y, gy) in grad.iter_mut().enumerate() {
                    let row = y * w..(y + 1) * w;
                    *gy += buf[row.clone()].iter().zip(&z[row]).map(|(b, z)| (b.conj() * z).re).sum::<f64>();
                }
            }
        }
        (loss, grad)
    }

    pub fn objective(&self, masks: &[Vec<f64>]) -> Result<ObjectiveValue> {
        self.check_masks(masks)?;
        let eff: Vec<Vec<f64>> = masks.iter().map(|m| self.effective(m)).collect();
        let losses: Vec<f64> = self.terms.par_iter().map(|t| self.slice_loss(t, &eff[t.group])).collect();
        self.combine(masks, losses.iter().sum::<f64>())
    }

    fn combine(&self, masks: &[Vec<f64>], physics_sum: f64) -> Result<ObjectiveValue> {
        let physics = physics_sum / self.terms.len() as f64;
        let mut reg = 0.0;
        for m in masks {
            reg += reg_loss(m, self.config.center_width, self.config.center_weight)?;
        }
        let reg = self.config.lambda_reg * reg / masks.len() as f64;
        Ok(ObjectiveValue {
            physics,
            reg,
            total: physics + reg,
        })
    }

    pub fn objective_and_gradient(&self, masks: &[Vec<f64>]) -> Result<(ObjectiveValue, Vec<Vec<f64>>)> {
        self.check_masks(masks)?;
        let eff: Vec<Vec<f64>> = masks.iter().map(|m| self.effective(m)).collect();
        let parts: Vec<(f64, Vec<f64>)> = self
            .terms
            .par_iter()
            .map(|t| self.slice_loss_and_gradient(t, &eff[t.group]))
            .collect();
        let n_terms = self.terms.len() as f64;
        let mut grads = vec![vec![0.0; self.n_pe]; masks.len()];
        let mut physics_sum = 0.0;
        for (term, (loss, g)) in self.terms.iter().zip(&parts) {
            physics_sum += loss;
            for (dst, v) in grads[term.group].iter_mut().zip(g) {
                *dst += v / n_terms;
            }
        }
        if self.config.keep_center {
            let y = self.n_pe;
            for g in &mut grads {
                g[y / 2 - 1] = 0.0;
                g[y / 2] = 0.0;
            }
        }
        let reg_g = reg_gradient(self.n_pe, self.config.center_width, self.config.center_weight);
        let scale = self.config.lambda_reg / masks.len() as f64;
        for g in &mut grads {
            g.iter_mut().zip(&reg_g).for_each(|(a, b)| *a += scale * b);
        }
        Ok((self.combine(masks, physics_sum)?, grads))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSolution {
    pub masks: BTreeMap<GroupId, Vec<f64>>,
    pub loss_trace: Vec<f64>,
    pub converged: bool,
    pub grouping: Grouping,
    pub slices: Vec<usize>,
    pub config: DetectorConfig,
}

impl MaskSolution {
    /// The mask applied to `slice` at reconstruction time, without
    /// keep-center.
    pub fn mask_for_slice(&self, slice: usize) -> Option<&[f64]> {
        self.masks.get(&group_of(self.grouping, slice)).map(|m| m.as_slice())
    }

    /// Reconstruction weights for every slice of an `n_slices` volume.
    pub fn slice_weights(&self, n_slices: usize, keep_center: bool) -> Result<Vec<Vec<f64>>> {
        (0..n_slices)
            .map(|s| {
                let mut m = self
                    .mask_for_slice(s)
                    .ok_or_else(|| Error::InvalidArgument(format!("no mask covers slice {s}")))?
                    .to_vec();
                if keep_center {
                    keep_center_weights(&mut m)?;
                }
                Ok(m)
            })
            .collect()
    }

    pub fn mean_weight(&self) -> f64 {
        let (sum, n) = self.masks.values().flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        sum / n.max(1) as f64
    }

    /// Fraction of weights below 0.5.
    pub fn excluded_fraction(&self) -> f64 {
        let (count, n) = self
            .masks
            .values()
            .flatten()
            .fold((0usize, 0usize), |(c, n), v| (c + (*v < 0.5) as usize, n + 1));
        count as f64 / n.max(1) as f64
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Projected Adam from all-ones masks. `observer` sees the masks after
/// every projected step.
pub fn optimize_with(
    problem: &DetectorProblem,
    observer: &mut dyn FnMut(usize, &[Vec<f64>]),
) -> Result<MaskSolution> {
    let cfg = &problem.config;
    let n_groups = problem.groups.len();
    let y = problem.n_pe;
    let mut masks = vec![vec![1.0; y]; n_groups];
    let mut m1 = vec![vec![0.0; y]; n_groups];
    let mut m2 = vec![vec![0.0; y]; n_groups];
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut last_change = f64::INFINITY;

    for it in 0..cfg.iterations {
        let (value, grads) = problem.objective_and_gradient(&masks)?;
        trace.push(value.total);
        if !value.total.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { iteration: it, trace });
        }
        let t = (it + 1) as i32;
        let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
        last_change = 0.0;
        for g in 0..n_groups {
            for i in 0..y {
                let grad = grads[g][i];
                m1[g][i] = BETA1 * m1[g][i] + (1.0 - BETA1) * grad;
                m2[g][i] = BETA2 * m2[g][i] + (1.0 - BETA2) * grad * grad;
                let step = cfg.learning_rate * (m1[g][i] / c1) / ((m2[g][i] / c2).sqrt() + ADAM_EPS);
                let next = (masks[g][i] - step).clamp(0.0, 1.0);
                last_change = last_change.max((next - masks[g][i]).abs());
                masks[g][i] = next;
            }
        }
        observer(it, &masks);
    }

    Ok(MaskSolution {
        masks: problem.groups.iter().cloned().zip(masks).collect(),
        loss_trace: trace,
        converged: last_change < 0.1 * cfg.learning_rate,
        grouping: cfg.grouping,
        slices: problem.slices(),
        config: *cfg,
    })
}

pub fn optimize(problem: &DetectorProblem) -> Result<MaskSolution> {
    optimize_with(problem, &mut |_, _| {})
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reg_loss_examples() {
        assert_eq!(reg_loss(&[1.0; 92], 10, 2.0).unwrap(), 0.0);
        assert_eq!(reg_loss(&[0.0; 92], 10, 2.0).unwrap(), 3.0);
        let mut m = vec![1.0; 92];
        for i in center_band(92, 10) {
            m[i] = 0.0;
        }
        assert!((reg_loss(&m, 10, 2.0).unwrap() - 2.10870).abs() < 1e-5);
        assert!(reg_loss(&[1.0; 8], 10, 2.0).is_err());
    }

    #[test]
    fn reg_gradient_is_closed_form() {
        let g = reg_gradient(92, 10, 2.0);
        let m: Vec<f64> = (0..92).map(|i| 0.3 + 0.005 * i as f64).collect();
        let h = 1e-6;
        for i in 0..92 {
            let mut p = m.clone();
            p[i] += h;
            let mut n = m.clone();
            n[i] -= h;
            let fd = (reg_loss(&p, 10, 2.0).unwrap() - reg_loss(&n, 10, 2.0).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8);
            let want = -1.0 / 92.0 - if (41..51).contains(&i) { 0.2 } else { 0.0 };
            assert!((g[i] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn binarize_examples() {
        assert_eq!(binarize(&[0.2, 0.5, 0.8], 0.5), vec![0.0, 1.0, 1.0]);
        assert_eq!(binarize(&[1.0; 4], 0.5), vec![1.0; 4]);
        assert_eq!(binarize(&[0.0, 0.3], 0.0), vec![1.0, 1.0]);
    }

    fn ramp_field(scale: f64) -> (FieldMap, VolumeMask) {
        let d = MapDims { slices: 1, h: 6, w: 7 };
        let omega: Vec<f64> = (0..42).map(|i| scale * (i % 7) as f64).collect();
        (FieldMap::new(d, omega).unwrap(), VolumeMask::new(d, vec![true; 42]).unwrap())
    }

    #[test]
    fn gradient_map_examples() {
        let d = MapDims { slices: 1, h: 4, w: 4 };
        let flat = FieldMap::new(d, vec![0.7; 16]).unwrap();
        let all = VolumeMask::new(d, vec![true; 16]).unwrap();
        assert!(susceptibility_gradient_map(&flat, &all, [2.0, 2.0, 3.0], GAMMA_HZ_PER_T).unwrap().iter().all(|v| *v == 0.0));

        // slope of 1 μT per voxel along x
        let per_voxel = crate::phantom::microtesla_to_rad_per_ms(1.0);
        let (field, roi) = ramp_field(per_voxel);
        let g = susceptibility_gradient_map(&field, &roi, [2.0, 2.0, 3.0], GAMMA_HZ_PER_T).unwrap();
        for v in &g {
            assert!((v - 1.0 / 0.002).abs() < 1e-9, "{v}");
        }
        let g2 = susceptibility_gradient_map(&field, &roi, [4.0, 4.0, 3.0], GAMMA_HZ_PER_T).unwrap();
        for (a, b) in g.iter().zip(&g2) {
            assert!((a - 2.0 * b).abs() < 1e-9);
        }
    }

    #[test]
    fn slice_selection_rules() {
        let d = MapDims { slices: 10, h: 2, w: 2 };
        let roi = VolumeMask::new(d, vec![true; 40]).unwrap();
        let sel = SliceSelect { max_gradient_ut_per_m: 80.0, n_slices: 8, take: SliceOrder::Inferior };
        let low = vec![10.0; 40];
        assert_eq!(select_slices(&low, &roi, &sel).unwrap(), (0..8).collect::<Vec<_>>());
        let mut some = vec![100.0; 40];
        for s in [3, 9] {
            some[s * 4..s * 4 + 4].iter_mut().for_each(|v| *v = 5.0);
        }
        assert_eq!(select_slices(&some, &roi, &sel).unwrap(), vec![3, 9]);
        let zero = SliceSelect { max_gradient_ut_per_m: 0.0, ..sel };
        assert!(select_slices(&low, &roi, &zero).is_err());
    }

    fn small_problem(corrupted: &[usize], config: &DetectorConfig) -> DetectorProblem {
        use crate::motion::{corrupt, B0Model, CorruptionPlan, SpherePoints};
        use crate::phantom::{generate, PhantomSpec};
        use rand::SeedableRng;
        let spec = PhantomSpec { matrix: 16, n_slices: 2, n_echoes: 4, ..PhantomSpec::default() };
        let p = generate(&spec).unwrap();
        let mut poses = vec![crate::model::RigidPose::IDENTITY; 32];
        for s in 0..2 {
            for &y in corrupted {
                poses[s * 16 + y] = crate::model::RigidPose { tx_mm: 4.0, rz_deg: 3.0, ..Default::default() };
            }
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let b0 = B0Model::random(&p.roi, 0.01, &mut rng).unwrap();
        let plan = CorruptionPlan::from_line_poses(2, 16, &poses, &[0.0; 32], 2.0, &b0, &SpherePoints::head()).unwrap();
        let k = corrupt(&p.image, &p.coils, &p.field, &plan, spec.tr_ms).unwrap();
        DetectorProblem::new(&k, &p.coils, &p.roi, &[0, 1], config).unwrap()
    }

    #[test]
    fn gradient_matches_central_differences() {
        use rand::{Rng, SeedableRng};
        for grouping in [Grouping::EvenOdd, Grouping::PerSlice] {
            let cfg = DetectorConfig { grouping, ..DetectorConfig::default() };
            let prob = small_problem(&[2, 3, 12], &cfg);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
            let masks: Vec<Vec<f64>> = (0..prob.groups().len())
                .map(|_| (0..16).map(|_| rng.random_range(0.3..0.9)).collect())
                .collect();
            let (value, grad) = prob.objective_and_gradient(&masks).unwrap();
            assert!((value.total - prob.objective(&masks).unwrap().total).abs() < 1e-14);
            let h = 1e-3;
            let (mut num, mut den) = (0.0, 0.0);
            for g in 0..masks.len() {
                for y in 0..16 {
                    let mut p = masks.clone();
                    p[g][y] += h;
                    let mut m = masks.clone();
                    m[g][y] -= h;
                    let fd = (prob.objective(&p).unwrap().total - prob.objective(&m).unwrap().total) / (2.0 * h);
                    num += (fd - grad[g][y]).powi(2);
                    den += fd * fd;
                }
            }
            let rel = (num / den).sqrt();
            assert!(rel < 1e-3, "{grouping:?}: relative error {rel}");
        }
    }

    #[test]
    fn iterates_stay_in_unit_box() {
        let cfg = DetectorConfig { iterations: 15, learning_rate: 0.2, ..DetectorConfig::default() };
        let prob = small_problem(&[1, 2, 13], &cfg);
        let mut steps = 0;
        let sol = optimize_with(&prob, &mut |_, masks| {
            steps += 1;
            assert!(masks.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
        })
        .unwrap();
        assert_eq!(steps, 15);
        assert_eq!(sol.loss_trace.len(), 15);
    }

    #[test]
    fn heavy_regularization_keeps_every_line() {
        let cfg = DetectorConfig { iterations: 20, lambda_reg: 10.0, ..DetectorConfig::default() };
        let sol = optimize(&small_problem(&[1, 2, 13], &cfg)).unwrap();
        assert!(sol.masks.values().flatten().all(|v| *v == 1.0));
    }

    #[test]
    fn motion_free_masks_stay_at_one() {
        let cfg = DetectorConfig { iterations: 20, ..DetectorConfig::default() };
        let prob = small_problem(&[], &cfg);
        let sol = optimize(&prob).unwrap();
        assert!(sol.excluded_fraction() == 0.0);
        assert!(sol.mean_weight() > 0.99);
        let round = MaskSolution::from_json(&sol.to_json().unwrap()).unwrap();
        assert_eq!(round, sol);
    }
}
