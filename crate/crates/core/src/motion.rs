//! Rigid-motion trajectories: PCA augmentation, displacement measurement,
//! corruption planning and synthesis of motion-corrupted k-space.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoding::{MotionState, SliceEncoder};
use crate::error::{Error, Result};
use crate::model::{
    CoilSensitivities, FieldMap, ImageStack, KSpaceData, KSpaceDims, MotionCurve, RigidPose, VolumeMask,
};
use crate::schedule::AcquisitionSchedule;

pub const DEFAULT_RESAMPLE_LEN: usize = 256;
pub const HEAD_RADIUS_MM: f64 = 64.0;
pub const DEFAULT_SPHERE_POINTS: usize = 2048;
pub const DEFAULT_THRESHOLD_MM: f64 = 2.0;
/// Field perturbation gain, rad/ms per mm of average displacement.
pub const DEFAULT_B0_GAIN: f64 = 0.01;

// ---------------------------------------------------------------- PCA

#[derive(Clone, Debug)]
pub struct PcaBasis {
    mean: MotionCurve,
    /// Unit-norm channel-stacked component curves, descending singular value.
    components: Vec<MotionCurve>,
    singular_values: Vec<f64>,
    n_kept: usize,
    n_curves: usize,
}

impl PcaBasis {
    pub fn mean_curve(&self) -> &MotionCurve {
        &self.mean
    }

    pub fn components(&self) -> &[MotionCurve] {
        &self.components
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn n_kept(&self) -> usize {
        self.n_kept
    }

    /// Number of nonzero components.
    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    /// Per-component standard deviation of the training scores.
    pub fn score_std(&self) -> Vec<f64> {
        let dof = (self.n_curves.max(2) - 1) as f64;
        self.singular_values.iter().map(|s| s / dof.sqrt()).collect()
    }
}

fn stack(curve: &MotionCurve, times: &[f64]) -> Vec<f64> {
    let l = times.len();
    let mut v = vec![0.0; 6 * l];
    for (k, t) in times.iter().enumerate() {
        let p = curve.sample(*t).0.to_array();
        for ch in 0..6 {
            v[ch * l + k] = p[ch];
        }
    }
    v
}

fn unstack(v: &[f64], times: &[f64]) -> Result<MotionCurve> {
    let l = times.len();
    let poses = (0..l)
        .map(|k| RigidPose::from_array(std::array::from_fn(|ch| v[ch * l + k])))
        .collect();
    MotionCurve::new(times.to_vec(), poses)
}

/// Principal components of channel-stacked curves resampled onto a common
/// axis spanning the mean duration.
pub fn fit_pca(curves: &[MotionCurve], resample_len: usize) -> Result<PcaBasis> {
    if curves.len() < 2 {
        return Err(Error::InvalidArgument(format!("PCA needs at least 2 curves, got {}", curves.len())));
    }
    if resample_len < 2 {
        return Err(Error::InvalidArgument("resample_len must be at least 2".into()));
    }
    let m = curves.len();
    let start = curves.iter().map(|c| c.t_s()[0]).sum::<f64>() / m as f64;
    let end = curves.iter().map(|c| *c.t_s().last().unwrap()).sum::<f64>() / m as f64;
    let span = if end > start { end - start } else { 1.0 };
    let times: Vec<f64> = (0..resample_len).map(|k| start + span * k as f64 / (resample_len - 1) as f64).collect();
    // each curve on its own span, mapped onto the common axis
    let rows: Vec<Vec<f64>> = curves
        .iter()
        .map(|c| {
            let (a, b) = (c.t_s()[0], *c.t_s().last().unwrap());
            let own: Vec<f64> = (0..resample_len).map(|k| a + (b - a) * k as f64 / (resample_len - 1) as f64).collect();
            stack(c, &own)
        })
        .collect();

    let dim = 6 * resample_len;
    let mut mean = vec![0.0; dim];
    for r in &rows {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / curves.len() as f64);
    }
    // factor the tall (dim x curves) matrix; components are its left vectors
    let centered = DMatrix::from_fn(dim, m, |j, i| rows[i][j] - mean[j]);
    let svd = centered.svd(true, false);
    let u = svd.u.expect("requested left singular vectors");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|a, b| svd.singular_values[*b].total_cmp(&svd.singular_values[*a]));

    let s_max = order.first().map_or(0.0, |i| svd.singular_values[*i]);
    let scale = rows.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    let tiny = (1e-10 * s_max).max(1e-12 * scale);
    let mut components = Vec::new();
    let mut singular_values = Vec::new();
    for i in order {
        let s = svd.singular_values[i];
        if s <= tiny {
            continue;
        }
        let row: Vec<f64> = u.column(i).iter().cloned().collect();
        components.push(unstack(&row, &times)?);
        singular_values.push(s);
    }
    let n_kept = (0.2 * components.len() as f64).ceil() as usize;
    Ok(PcaBasis {
        mean: unstack(&mean, &times)?,
        components,
        singular_values,
        n_kept,
        n_curves: m,
    })
}

/// `mean + sum_i alpha_i * pc_i` over the kept components.
pub fn sample_curve(basis: &PcaBasis, alpha: &[f64]) -> Result<MotionCurve> {
    if alpha.len() != basis.n_kept {
        return Err(Error::Shape(format!("expected {} weights, got {}", basis.n_kept, alpha.len())));
    }
    if alpha.iter().any(|a| !a.is_finite()) {
        return Err(Error::InvalidArgument("weights must be finite".into()));
    }
    let mut poses: Vec<[f64; 6]> = basis.mean.poses().iter().map(|p| p.to_array()).collect();
    for (a, pc) in alpha.iter().zip(&basis.components) {
        for (dst, src) in poses.iter_mut().zip(pc.poses()) {
            let s = src.to_array();
            for ch in 0..6 {
                dst[ch] += a * s[ch];
            }
        }
    }
    Ok(basis.mean.with_poses(poses.into_iter().map(RigidPose::from_array).collect()))
}

/// Zero-mean Gaussian weights with the training score spread of each kept
/// component.
pub fn draw_alpha(basis: &PcaBasis, rng: &mut impl Rng) -> Vec<f64> {
    basis
        .score_std()
        .iter()
        .take(basis.n_kept)
        .map(|s| s * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Projection scores of `curve` onto every component, for the curve
/// resampled onto the basis axis.
pub fn project(basis: &PcaBasis, curve: &MotionCurve) -> Vec<f64> {
    let t = basis.mean.t_s();
    let (a, b) = (curve.t_s()[0], *curve.t_s().last().unwrap());
    let own: Vec<f64> = (0..t.len()).map(|k| a + (b - a) * k as f64 / (t.len() - 1) as f64).collect();
    let x = stack(curve, &own);
    let mean = stack(&basis.mean, t);
    basis
        .components
        .iter()
        .map(|pc| {
            let v = stack(pc, t);
            x.iter().zip(&mean).zip(&v).map(|((xi, mi), vi)| (xi - mi) * vi).sum()
        })
        .collect()
}

// ------------------------------------------------------- displacement

/// Fixed quasi-uniform points in a solid sphere (Halton bases 2, 3, 5).
#[derive(Clone, Debug)]
pub struct SpherePoints {
    points: Vec<[f64; 3]>,
    radius_mm: f64,
}

fn halton(mut i: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

impl SpherePoints {
    pub fn new(radius_mm: f64, n_points: usize) -> Result<Self> {
        if n_points < 100 {
            return Err(Error::InvalidArgument(format!("need at least 100 sphere points, got {n_points}")));
        }
        if !(radius_mm > 0.0) {
            return Err(Error::InvalidArgument("sphere radius must be positive".into()));
        }
        let mut points = Vec::with_capacity(n_points);
        let mut i = 1;
        while points.len() < n_points {
            let p = [2.0 * halton(i, 2) - 1.0, 2.0 * halton(i, 3) - 1.0, 2.0 * halton(i, 5) - 1.0];
            i += 1;
            if p.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
                points.push(p.map(|v| v * radius_mm));
            }
        }
        Ok(SpherePoints { points, radius_mm })
    }

    pub fn head() -> Self {
        SpherePoints::new(HEAD_RADIUS_MM, DEFAULT_SPHERE_POINTS).expect("valid defaults")
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn radius_mm(&self) -> f64 {
        self.radius_mm
    }
}

/// Rotation `Rz * Ry * Rx` of a pose, row-major.
pub fn rotation_matrix(pose: &RigidPose) -> [[f64; 3]; 3] {
    let (sx, cx) = pose.rx_deg.to_radians().sin_cos();
    let (sy, cy) = pose.ry_deg.to_radians().sin_cos();
    let (sz, cz) = pose.rz_deg.to_radians().sin_cos();
    [
        [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
        [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
        [-sy, cy * sx, cy * cx],
    ]
}

/// Rigid transform of `p`: rotation about the origin, then translation.
pub fn transform_point(pose: &RigidPose, p: [f64; 3]) -> [f64; 3] {
    let r = rotation_matrix(pose);
    let t = [pose.tx_mm, pose.ty_mm, pose.tz_mm];
    std::array::from_fn(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + t[i])
}

/// Mean distance between the points moved by `pose` and by `reference`.
pub fn average_displacement(pose: &RigidPose, reference: &RigidPose, points: &SpherePoints) -> f64 {
    let (ra, rb) = (rotation_matrix(pose), rotation_matrix(reference));
    let dr: [[f64; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| ra[i][j] - rb[i][j]));
    let dt = [pose.tx_mm - reference.tx_mm, pose.ty_mm - reference.ty_mm, pose.tz_mm - reference.tz_mm];
    let total: f64 = points
        .points
        .iter()
        .map(|p| {
            let d: [f64; 3] = std::array::from_fn(|i| dr[i][0] * p[0] + dr[i][1] * p[1] + dr[i][2] * p[2] + dt[i]);
            (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
        })
        .sum();
    total / points.points.len() as f64
}

/// Subtracts the parameters of the median-displacement sample so that it
/// becomes the zero state. Displacements are measured for the pose
/// differences to the first sample; with an even count the lower median is
/// used.
pub fn center_median(curve: &MotionCurve, points: &SpherePoints) -> MotionCurve {
    let first = curve.poses()[0];
    let disp: Vec<f64> = curve
        .poses()
        .iter()
        .map(|p| average_displacement(&p.minus(first), &RigidPose::IDENTITY, points))
        .collect();
    let mut order: Vec<usize> = (0..disp.len()).collect();
    order.sort_by(|a, b| disp[*a].total_cmp(&disp[*b]).then(a.cmp(b)));
    let median = curve.poses()[order[(order.len() - 1) / 2]];
    curve.with_poses(curve.poses().iter().map(|p| p.minus(median)).collect())
}

// -------------------------------------------------- field perturbation

/// `omega_delta = gain * displacement * P_slice`, with `P_slice` a smooth
/// quadratic polynomial of unit RMS on the roi and zero outside.
#[derive(Clone, Debug)]
pub struct B0Model {
    gain: f64,
    patterns: Vec<Arc<[f64]>>,
}

impl B0Model {
    pub fn zero() -> Self {
        B0Model {
            gain: 0.0,
            patterns: Vec::new(),
        }
    }

    pub fn random(roi: &VolumeMask, gain: f64, rng: &mut impl Rng) -> Result<Self> {
        if !gain.is_finite() || gain < 0.0 {
            return Err(Error::InvalidArgument(format!("B0 gain must be >= 0, got {gain}")));
        }
        let d = roi.dims();
        let mut patterns = Vec::with_capacity(d.slices);
        for s in 0..d.slices {
            let c: [f64; 6] = std::array::from_fn(|_| rng.sample(StandardNormal));
            let mask = roi.slice(s);
            let mut p = vec![0.0; d.plane()];
            let mut ss = 0.0;
            let mut count = 0usize;
            for y in 0..d.h {
                let v = 2.0 * y as f64 / d.h as f64 - 1.0;
                for x in 0..d.w {
                    let i = y * d.w + x;
                    if !mask[i] {
                        continue;
                    }
                    let u = 2.0 * x as f64 / d.w as f64 - 1.0;
                    p[i] = c[0] + c[1] * u + c[2] * v + c[3] * u * u + c[4] * u * v + c[5] * v * v;
                    ss += p[i] * p[i];
                    count += 1;
                }
            }
            let rms = if count > 0 { (ss / count as f64).sqrt() } else { 0.0 };
            if rms > 0.0 {
                p.iter_mut().for_each(|v| *v /= rms);
            }
            patterns.push(Arc::from(p));
        }
        Ok(B0Model { gain, patterns })
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    pub fn pattern(&self, slice: usize) -> Option<&[f64]> {
        self.patterns.get(slice).map(|p| &p[..])
    }

    /// Perturbation for a state with average displacement `d_mm`.
    pub fn delta(&self, slice: usize, d_mm: f64) -> Option<Arc<[f64]>> {
        if self.gain == 0.0 || d_mm == 0.0 {
            return None;
        }
        let p = self.patterns.get(slice)?;
        let f = self.gain * d_mm;
        Some(p.iter().map(|v| v * f).collect())
    }
}

// ------------------------------------------------------------ planning

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinePlan {
    pub slice: usize,
    pub pe: usize,
    pub time_s: f64,
    pub pose: RigidPose,
    pub displacement_mm: f64,
    pub corrupted: bool,
}

#[derive(Clone, Debug)]
pub struct CorruptionPlan {
    n_slices: usize,
    n_pe: usize,
    threshold_mm: f64,
    lines: Vec<LinePlan>,
    states: Vec<MotionState>,
}

#[derive(Serialize)]
struct PlanExport<'a> {
    threshold_mm: f64,
    b0_gain: f64,
    n_slices: usize,
    n_pe: usize,
    lines: &'a [LinePlan],
}

impl CorruptionPlan {
    /// Plan from the pose of every `(slice, pe)` line, index `slice * n_pe + pe`.
    pub fn from_line_poses(
        n_slices: usize,
        n_pe: usize,
        poses: &[RigidPose],
        times_s: &[f64],
        threshold_mm: f64,
        b0: &B0Model,
        points: &SpherePoints,
    ) -> Result<Self> {
        let n = n_slices * n_pe;
        if poses.len() != n || times_s.len() != n {
            return Err(Error::Shape(format!("plan needs {n} line poses and times")));
        }
        if threshold_mm.is_nan() {
            return Err(Error::InvalidArgument("threshold must not be NaN".into()));
        }
        let mut lines = Vec::with_capacity(n);
        let mut states = Vec::with_capacity(n);
        for slice in 0..n_slices {
            for pe in 0..n_pe {
                let i = slice * n_pe + pe;
                let pose = poses[i];
                let d = average_displacement(&pose, &RigidPose::IDENTITY, points);
                let corrupted = d > threshold_mm;
                let state = if corrupted {
                    let s = MotionState::rigid(pose.tx_mm, pose.ty_mm, pose.rz_deg);
                    match b0.delta(slice, d) {
                        Some(om) => s.with_omega(om),
                        None => s,
                    }
                } else {
                    MotionState::identity()
                };
                lines.push(LinePlan {
                    slice,
                    pe,
                    time_s: times_s[i],
                    pose,
                    displacement_mm: d,
                    corrupted,
                });
                states.push(state);
            }
        }
        Ok(CorruptionPlan {
            n_slices,
            n_pe,
            threshold_mm,
            lines,
            states,
        })
    }

    pub fn identity(n_slices: usize, n_pe: usize) -> Self {
        let lines = (0..n_slices * n_pe)
            .map(|i| LinePlan {
                slice: i / n_pe,
                pe: i % n_pe,
                time_s: 0.0,
                pose: RigidPose::IDENTITY,
                displacement_mm: 0.0,
                corrupted: false,
            })
            .collect();
        CorruptionPlan {
            n_slices,
            n_pe,
            threshold_mm: f64::INFINITY,
            lines,
            states: vec![MotionState::identity(); n_slices * n_pe],
        }
    }

    pub fn n_slices(&self) -> usize {
        self.n_slices
    }

    pub fn n_pe(&self) -> usize {
        self.n_pe
    }

    pub fn threshold_mm(&self) -> f64 {
        self.threshold_mm
    }

    pub fn lines(&self) -> &[LinePlan] {
        &self.lines
    }

    pub fn states(&self, slice: usize) -> &[MotionState] {
        &self.states[slice * self.n_pe..(slice + 1) * self.n_pe]
    }

    /// Reference mask of one slice: 1 = clean, 0 = corrupted.
    pub fn reference_mask(&self, slice: usize) -> Vec<f64> {
        self.lines[slice * self.n_pe..(slice + 1) * self.n_pe]
            .iter()
            .map(|l| if l.corrupted { 0.0 } else { 1.0 })
            .collect()
    }

    /// Reference of a set of slices: a line is clean only if it is clean in
    /// every listed slice.
    pub fn combined_reference(&self, slices: &[usize]) -> Vec<f64> {
        let mut out = vec![1.0f64; self.n_pe];
        for s in slices {
            for (o, r) in out.iter_mut().zip(self.reference_mask(*s)) {
                *o = o.min(r);
            }
        }
        out
    }

    pub fn corrupted_count(&self) -> usize {
        self.lines.iter().filter(|l| l.corrupted).count()
    }

    pub fn to_json(&self, b0: &B0Model) -> Result<String> {
        serde_json::to_string_pretty(&PlanExport {
            threshold_mm: self.threshold_mm,
            b0_gain: b0.gain(),
            n_slices: self.n_slices,
            n_pe: self.n_pe,
            lines: &self.lines,
        })
        .map_err(|e| Error::Format(e.to_string()))
    }
}

/// Samples `curve` at every acquisition time and thresholds the average
/// displacement against the zero state.
pub fn build_plan(
    curve: &MotionCurve,
    schedule: &AcquisitionSchedule,
    threshold_mm: f64,
    b0: &B0Model,
    points: &SpherePoints,
) -> Result<CorruptionPlan> {
    let (s_count, y_count) = (schedule.n_slices(), schedule.n_pe());
    let mut poses = Vec::with_capacity(s_count * y_count);
    let mut times = Vec::with_capacity(s_count * y_count);
    let mut clamped = 0usize;
    for s in 0..s_count {
        for y in 0..y_count {
            let t = schedule.time_s(s, y);
            let (pose, c) = curve.sample(t);
            clamped += c as usize;
            poses.push(pose);
            times.push(t);
        }
    }
    if clamped > 0 {
        log::warn!("{clamped} acquisition times fall outside the motion curve and were clamped");
    }
    CorruptionPlan::from_line_poses(s_count, y_count, &poses, &times, threshold_mm, b0, points)
}

/// Synthesizes k-space of `image` under `plan`. Identity lines equal the
/// static forward model.
pub fn corrupt(
    image: &ImageStack,
    coils: &CoilSensitivities,
    field: &FieldMap,
    plan: &CorruptionPlan,
    tr_ms: f64,
) -> Result<KSpaceData> {
    let d = image.dims();
    if plan.n_slices != d.slices || plan.n_pe != d.h {
        return Err(Error::Shape(format!(
            "plan covers {} x {} lines, image has {} x {}",
            plan.n_slices, plan.n_pe, d.slices, d.h
        )));
    }
    if coils.dims().slices != d.slices || coils.dims().h != d.h || coils.dims().w != d.w {
        return Err(Error::Shape("coil maps do not match the image".into()));
    }
    if field.dims().slices != d.slices || field.dims().h != d.h || field.dims().w != d.w {
        return Err(Error::Shape("field map does not match the image".into()));
    }
    let vox = image.voxel_size_mm();
    let encoder = SliceEncoder::new(d.h, d.w, [vox[0], vox[1]]);
    let tes = image.echo_times_ms();
    let per_slice: Vec<Result<Vec<_>>> = (0..d.slices)
        .into_par_iter()
        .map(|s| encoder.forward(image.slice(s), &coils.slice_maps(s), Some(field.slice(s)), tes, plan.states(s)))
        .collect();
    let mut samples = Vec::with_capacity(d.slices * d.echoes * coils.coils() * d.plane());
    for r in per_slice {
        samples.extend(r?);
    }
    KSpaceData::new(
        KSpaceDims {
            slices: d.slices,
            echoes: d.echoes,
            coils: coils.coils(),
            pe: d.h,
            ro: d.w,
        },
        samples,
        tes.to_vec(),
        tr_ms,
        vox,
    )
}

/// Adds complex Gaussian noise of standard deviation `std` per component.
pub fn add_noise(kspace: KSpaceData, std: f64, rng: &mut impl Rng) -> Result<KSpaceData> {
    if std == 0.0 {
        return Ok(kspace);
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let (dims, tes, tr, vox) = (kspace.dims(), kspace.echo_times_ms().to_vec(), kspace.tr_ms(), kspace.voxel_size_mm());
    let mut samples = kspace.into_samples();
    for v in &mut samples {
        v.re += normal.sample(rng);
        v.im += normal.sample(rng);
    }
    KSpaceData::new(dims, samples, tes, tr, vox)
}

// ------------------------------------------------------ synthetic curves

/// Amplitudes of the synthetic training curves.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticMotion {
    pub sample_interval_s: f64,
    /// Slow drift amplitude per channel (mm, mm, mm, deg, deg, deg).
    pub drift: [f64; 6],
    /// Number of sudden events per curve, inclusive range.
    pub events: [usize; 2],
    /// Peak event amplitude per channel.
    pub event_amplitude: [f64; 6],
    /// Event duration range, seconds.
    pub event_duration_s: [f64; 2],
}

impl Default for SyntheticMotion {
    fn default() -> Self {
        SyntheticMotion {
            sample_interval_s: 0.5,
            drift: [0.6, 0.8, 0.4, 0.8, 0.4, 0.4],
            events: [2, 4],
            event_amplitude: [2.5, 4.0, 1.5, 4.0, 1.5, 1.5],
            event_duration_s: [8.0, 40.0],
        }
    }
}

/// Random training curve of smooth drift plus a few sudden head movements
/// that persist for a while before returning.
pub fn synthetic_curve(duration_s: f64, cfg: &SyntheticMotion, rng: &mut impl Rng) -> Result<MotionCurve> {
    if !(duration_s > 0.0) || !(cfg.sample_interval_s > 0.0) {
        return Err(Error::InvalidArgument("duration and sample interval must be positive".into()));
    }
    let n = (duration_s / cfg.sample_interval_s).ceil() as usize + 1;
    let t: Vec<f64> = (0..n).map(|i| i as f64 * cfg.sample_interval_s).collect();
    let mut values = vec![[0.0f64; 6]; n];
    for ch in 0..6 {
        for _ in 0..3 {
            let freq = rng.random_range(0.3..2.0) / duration_s;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = cfg.drift[ch] * rng.sample::<f64, _>(StandardNormal) / 3f64.sqrt();
            for (v, ti) in values.iter_mut().zip(&t) {
                v[ch] += amp * (std::f64::consts::TAU * freq * ti + phase).sin();
            }
        }
    }
    let (lo, hi) = (cfg.events[0], cfg.events[1].max(cfg.events[0]));
    let n_events = rng.random_range(lo..=hi);
    for _ in 0..n_events {
        let len = rng.random_range(cfg.event_duration_s[0]..=cfg.event_duration_s[1].max(cfg.event_duration_s[0]));
        let start = rng.random_range(0.0..(duration_s - len).max(1e-9));
        let ramp = (0.15 * len).max(cfg.sample_interval_s);
        let amp: [f64; 6] = std::array::from_fn(|ch| cfg.event_amplitude[ch] * rng.random_range(-1.0..1.0));
        for (v, ti) in values.iter_mut().zip(&t) {
            let x = ti - start;
            let w = if x < 0.0 || x > len {
                0.0
            } else if x < ramp {
                0.5 - 0.5 * (std::f64::consts::PI * x / ramp).cos()
            } else if x > len - ramp {
                0.5 - 0.5 * (std::f64::consts::PI * (len - x) / ramp).cos()
            } else {
                1.0
            };
            for ch in 0..6 {
                v[ch] += w * amp[ch];
            }
        }
    }
    MotionCurve::new(t, values.into_iter().map(RigidPose::from_array).collect())
}

/// `n` independent synthetic curves of `duration_s`.
pub fn synthetic_bank(n: usize, duration_s: f64, cfg: &SyntheticMotion, rng: &mut impl Rng) -> Result<Vec<MotionCurve>> {
    (0..n).map(|_| synthetic_curve(duration_s, cfg, rng)).collect()
}

/// Draws a curve from `basis` and centers it on its median-displacement
/// sample.
pub fn augmented_curve(basis: &PcaBasis, points: &SpherePoints, rng: &mut impl Rng) -> Result<MotionCurve> {
    let alpha = draw_alpha(basis, rng);
    Ok(center_median(&sample_curve(basis, &alpha)?, points))
}
