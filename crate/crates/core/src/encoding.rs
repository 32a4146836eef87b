//! Motion-aware multicoil Cartesian encoding, its adjoint and a CG-SENSE
//! style weighted least-squares reconstruction.
//!
//! Per slice, k-space is laid out `[echo, coil, pe, ro]` and images
//! `[echo, h, w]` with `h = pe` and `w = ro`. Line weights act on PE rows.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::Fft2;
use crate::model::{CoilSensitivities, ExclusionMask, ImageDims, ImageStack, KSpaceData, C64};

/// Factor in the B0 phase term `exp(-i * factor * omega * TE)`.
pub const B0_PHASE_FACTOR: f64 = 2.0;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

/// In-plane rigid state plus an additive field perturbation.
#[derive(Clone, Debug, Default)]
pub struct MotionState {
    pub tx_mm: f64,
    pub ty_mm: f64,
    pub rz_deg: f64,
    /// rad/ms, indexed `[h, w]`.
    pub omega_delta: Option<Arc<[f64]>>,
}

impl MotionState {
    pub fn identity() -> Self {
        MotionState::default()
    }

    pub fn rigid(tx_mm: f64, ty_mm: f64, rz_deg: f64) -> Self {
        MotionState {
            tx_mm,
            ty_mm,
            rz_deg,
            omega_delta: None,
        }
    }

    pub fn with_omega(mut self, omega_delta: Arc<[f64]>) -> Self {
        self.omega_delta = Some(omega_delta);
        self
    }

    pub fn is_rigid_identity(&self) -> bool {
        self.tx_mm == 0.0 && self.ty_mm == 0.0 && self.rz_deg == 0.0
    }

    pub fn is_identity(&self) -> bool {
        self.is_rigid_identity() && self.omega_delta.is_none()
    }

    fn validate(&self, plane: usize) -> Result<()> {
        if !(self.tx_mm.is_finite() && self.ty_mm.is_finite() && self.rz_deg.is_finite()) {
            return Err(Error::invariant("motion_state", "rigid parameters must be finite"));
        }
        if let Some(om) = &self.omega_delta {
            if om.len() != plane {
                return Err(Error::Shape(format!(
                    "omega_delta has {} values, slice has {plane}",
                    om.len()
                )));
            }
            if om.iter().any(|v| !v.is_finite()) {
                return Err(Error::invariant("omega_delta", "must be finite"));
            }
        }
        Ok(())
    }
}

impl PartialEq for MotionState {
    fn eq(&self, other: &Self) -> bool {
        let omega_eq = match (&self.omega_delta, &other.omega_delta) {
            (None, None) => true,
            (Some(a), Some(b)) => Arc::ptr_eq(a, b) || a[..] == b[..],
            _ => false,
        };
        self.tx_mm == other.tx_mm && self.ty_mm == other.ty_mm && self.rz_deg == other.rz_deg && omega_eq
    }
}

/// Rotates about the image center (bilinear, zero outside) and then
/// translates by `(ty, tx)` mm. `voxel_mm` is `[row, column]` spacing.
pub fn apply_rigid(image: &[C64], h: usize, w: usize, state: &MotionState, voxel_mm: [f64; 2]) -> Vec<C64> {
    if state.is_rigid_identity() {
        return image.to_vec();
    }
    let ty_px = state.ty_mm / voxel_mm[0];
    let tx_px = state.tx_mm / voxel_mm[1];

    if state.rz_deg == 0.0 && ty_px.fract() == 0.0 && tx_px.fract() == 0.0 {
        let (dy, dx) = (ty_px as isize, tx_px as isize);
        let mut out = vec![ZERO; h * w];
        for i in 0..h as isize {
            let si = i - dy;
            if si < 0 || si >= h as isize {
                continue;
            }
            for j in 0..w as isize {
                let sj = j - dx;
                if sj >= 0 && sj < w as isize {
                    out[(i as usize) * w + j as usize] = image[(si as usize) * w + sj as usize];
                }
            }
        }
        return out;
    }

    let (sin, cos) = state.rz_deg.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let at = |y: isize, x: isize| -> C64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            ZERO
        } else {
            image[y as usize * w + x as usize]
        }
    };
    let mut out = vec![ZERO; h * w];
    for i in 0..h {
        let yr = i as f64 - ty_px - cy;
        for j in 0..w {
            let xr = j as f64 - tx_px - cx;
            let xs = cos * xr + sin * yr + cx;
            let ys = -sin * xr + cos * yr + cy;
            let (y0, x0) = (ys.floor(), xs.floor());
            let (fy, fx) = (ys - y0, xs - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            out[i * w + j] = at(y0, x0) * ((1.0 - fy) * (1.0 - fx))
                + at(y0, x0 + 1) * ((1.0 - fy) * fx)
                + at(y0 + 1, x0) * (fy * (1.0 - fx))
                + at(y0 + 1, x0 + 1) * (fy * fx);
        }
    }
    out
}

/// Multiplies by `exp(-2i * omega * TE)`.
pub fn apply_b0_phase(image: &[C64], omega: &[f64], te_ms: f64) -> Result<Vec<C64>> {
    let mut out = image.to_vec();
    apply_b0_phase_in_place(&mut out, omega, te_ms, B0_PHASE_FACTOR)?;
    Ok(out)
}

pub fn apply_b0_phase_in_place(image: &mut [C64], omega: &[f64], te_ms: f64, factor: f64) -> Result<()> {
    if image.len() != omega.len() {
        return Err(Error::Shape(format!(
            "image has {} values, field has {}",
            image.len(),
            omega.len()
        )));
    }
    for (v, om) in image.iter_mut().zip(omega) {
        if *om != 0.0 {
            *v *= C64::from_polar(1.0, -factor * om * te_ms);
        }
    }
    Ok(())
}

/// Sets the two central PE line weights to one.
pub fn keep_center(mask: &ExclusionMask) -> Result<ExclusionMask> {
    let mut w = mask.weights().to_vec();
    keep_center_weights(&mut w)?;
    ExclusionMask::new(mask.group, w)
}

pub fn keep_center_weights(weights: &mut [f64]) -> Result<()> {
    let y = weights.len();
    if y % 2 != 0 || y == 0 {
        return Err(Error::InvalidArgument(format!("keep_center needs an even, positive line count, got {y}")));
    }
    weights[y / 2 - 1] = 1.0;
    weights[y / 2] = 1.0;
    Ok(())
}

/// Indices of the PE lines forced to one by [`keep_center`].
pub fn center_lines(y: usize) -> [usize; 2] {
    [y / 2 - 1, y / 2]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CgOptions {
    pub mu: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for CgOptions {
    fn default() -> Self {
        CgOptions {
            mu: 1e-3,
            max_iter: 30,
            tol: 1e-6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CgReport {
    pub converged: bool,
    pub iterations: usize,
    /// Largest final residual relative to the initial one.
    pub relative_residual: f64,
}

impl CgReport {
    fn merge(self, other: CgReport) -> CgReport {
        CgReport {
            converged: self.converged && other.converged,
            iterations: self.iterations.max(other.iterations),
            relative_residual: self.relative_residual.max(other.relative_residual),
        }
    }

    fn trivial() -> CgReport {
        CgReport {
            converged: true,
            iterations: 0,
            relative_residual: 0.0,
        }
    }
}

/// Encoding machinery for one slice geometry.
#[derive(Clone)]
pub struct SliceEncoder {
    fft: Fft2,
    voxel_mm: [f64; 2],
    phase_factor: f64,
}

impl SliceEncoder {
    pub fn new(h: usize, w: usize, voxel_mm: [f64; 2]) -> Self {
        SliceEncoder {
            fft: Fft2::new(h, w),
            voxel_mm,
            phase_factor: B0_PHASE_FACTOR,
        }
    }

    pub fn with_phase_factor(mut self, factor: f64) -> Self {
        self.phase_factor = factor;
        self
    }

    pub fn h(&self) -> usize {
        self.fft.h()
    }

    pub fn w(&self) -> usize {
        self.fft.w()
    }

    pub fn plane(&self) -> usize {
        self.h() * self.w()
    }

    pub fn fft(&self) -> &Fft2 {
        &self.fft
    }

    fn check_coils(&self, coils: &[&[C64]]) -> Result<()> {
        if coils.is_empty() || coils.iter().any(|c| c.len() != self.plane()) {
            return Err(Error::Shape("coil maps do not match the slice".into()));
        }
        Ok(())
    }

    /// Motion-aware forward model. `states[y]` is the state while line `y`
    /// was acquired; lines sharing a state share one transform.
    pub fn forward(
        &self,
        image: &[C64],
        coils: &[&[C64]],
        base_omega: Option<&[f64]>,
        echo_times_ms: &[f64],
        states: &[MotionState],
    ) -> Result<Vec<C64>> {
        let (h, w, plane) = (self.h(), self.w(), self.plane());
        let n_e = echo_times_ms.len();
        let n_c = coils.len();
        self.check_coils(coils)?;
        if image.len() != n_e * plane {
            return Err(Error::Shape(format!(
                "image has {} values, expected {n_e} x {h} x {w}",
                image.len()
            )));
        }
        if states.len() != h {
            return Err(Error::Shape(format!("{} motion states for {h} PE lines", states.len())));
        }
        if let Some(b) = base_omega {
            if b.len() != plane {
                return Err(Error::Shape("base field does not match the slice".into()));
            }
        }
        for s in states {
            s.validate(plane)?;
        }

        // group lines by state
        let mut groups: Vec<(&MotionState, Vec<usize>)> = Vec::new();
        for (y, s) in states.iter().enumerate() {
            match groups.iter_mut().find(|(g, _)| *g == s) {
                Some((_, rows)) => rows.push(y),
                None => groups.push((s, vec![y])),
            }
        }

        let mut out = vec![ZERO; n_e * n_c * plane];
        let mut omega = vec![0.0; plane];
        let mut buf = vec![ZERO; plane];
        for (state, rows) in &groups {
            omega.iter_mut().for_each(|v| *v = 0.0);
            if let Some(b) = base_omega {
                omega.copy_from_slice(b);
            }
            if let Some(d) = &state.omega_delta {
                omega.iter_mut().zip(d.iter()).for_each(|(o, d)| *o += d);
            }
            for (e, te) in echo_times_ms.iter().enumerate() {
                let mut moved = apply_rigid(&image[e * plane..(e + 1) * plane], h, w, state, self.voxel_mm);
                apply_b0_phase_in_place(&mut moved, &omega, *te, self.phase_factor)?;
                for (c, coil) in coils.iter().enumerate() {
                    for ((b, m), s) in buf.iter_mut().zip(&moved).zip(coil.iter()) {
                        *b = m * s;
                    }
                    self.fft.forward(&mut buf);
                    let dst = &mut out[(e * n_c + c) * plane..(e * n_c + c + 1) * plane];
                    for &y in rows {
                        dst[y * w..(y + 1) * w].copy_from_slice(&buf[y * w..(y + 1) * w]);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Forward model with every line in the identity state.
    pub fn forward_static(
        &self,
        image: &[C64],
        coils: &[&[C64]],
        base_omega: Option<&[f64]>,
        echo_times_ms: &[f64],
    ) -> Result<Vec<C64>> {
        let states = vec![MotionState::identity(); self.h()];
        self.forward(image, coils, base_omega, echo_times_ms, &states)
    }

    /// Inverse FFT along readout of every k-space row. The result is the
    /// hybrid `(pe, x)` representation used by the reconstruction.
    pub fn to_hybrid(&self, kspace: &[C64]) -> Vec<C64> {
        let mut z = kspace.to_vec();
        for plane in z.chunks_exact_mut(self.plane()) {
            self.fft.rows(plane, true);
        }
        z
    }

    fn check_kspace(&self, kspace: &[C64], n_coils: usize, weights: &[f64]) -> Result<usize> {
        let per_echo = n_coils * self.plane();
        if kspace.is_empty() || kspace.len() % per_echo != 0 {
            return Err(Error::Shape(format!(
                "k-space of {} values is not a multiple of {n_coils} coils x {} x {}",
                kspace.len(),
                self.h(),
                self.w()
            )));
        }
        if weights.len() != self.h() {
            return Err(Error::Shape(format!("mask has {} lines, k-space has {}", weights.len(), self.h())));
        }
        Ok(kspace.len() / per_echo)
    }

    /// `sum_c conj(C_c) * IFFT2(W y_c)` per echo.
    pub fn adjoint(&self, kspace: &[C64], weights: &[f64], coils: &[&[C64]]) -> Result<Vec<C64>> {
        self.check_coils(coils)?;
        let n_e = self.check_kspace(kspace, coils.len(), weights)?;
        let z = self.to_hybrid(kspace);
        Ok(self.adjoint_hybrid(&z, n_e, weights, coils))
    }

    /// Adjoint applied to data already in the hybrid representation.
    pub fn adjoint_hybrid(&self, z: &[C64], n_echoes: usize, weights: &[f64], coils: &[&[C64]]) -> Vec<C64> {
        let plane = self.plane();
        let w = self.w();
        let n_c = coils.len();
        let mut out = vec![ZERO; n_echoes * plane];
        let mut buf = vec![ZERO; plane];
        for e in 0..n_echoes {
            let x = &mut out[e * plane..(e + 1) * plane];
            for (c, coil) in coils.iter().enumerate() {
                let src = &z[(e * n_c + c) * plane..(e * n_c + c + 1) * plane];
                for (y, wy) in weights.iter().enumerate() {
                    for i in y * w..(y + 1) * w {
                        buf[i] = src[i] * *wy;
                    }
                }
                self.fft.cols(&mut buf, true);
                for ((xv, b), s) in x.iter_mut().zip(&buf).zip(coil.iter()) {
                    *xv += s.conj() * b;
                }
            }
        }
        out
    }

    /// `out = sum_c conj(C_c) F_y^H W F_y (C_c x)`, the normal operator of
    /// the masked encoding. Readout transforms cancel because the weights
    /// act on whole rows.
    fn normal(&self, x: &[C64], weights: &[f64], coils: &[&[C64]], buf: &mut [C64], out: &mut [C64]) {
        let w = self.w();
        out.iter_mut().for_each(|v| *v = ZERO);
        for coil in coils {
            for ((b, xv), s) in buf.iter_mut().zip(x).zip(coil.iter()) {
                *b = xv * s;
            }
            self.fft.cols(buf, false);
            for (y, wy) in weights.iter().enumerate() {
                for b in &mut buf[y * w..(y + 1) * w] {
                    *b *= *wy;
                }
            }
            self.fft.cols(buf, true);
            for ((o, b), s) in out.iter_mut().zip(buf.iter()).zip(coil.iter()) {
                *o += s.conj() * b;
            }
        }
    }

    /// Solves `(A^H A + mu) x = A^H W^{1/2} y` per echo by conjugate gradients,
    /// where `A = W^{1/2} F C`.
    pub fn cg_reconstruct(
        &self,
        kspace: &[C64],
        weights: &[f64],
        coils: &[&[C64]],
        options: &CgOptions,
    ) -> Result<(Vec<C64>, CgReport)> {
        self.check_coils(coils)?;
        let n_e = self.check_kspace(kspace, coils.len(), weights)?;
        if !(options.mu >= 0.0) || !options.mu.is_finite() {
            return Err(Error::InvalidArgument(format!("mu must be >= 0, got {}", options.mu)));
        }
        if weights.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invariant("mask", "weights must lie in [0, 1]"));
        }
        let rhs = self.adjoint(kspace, weights, coils)?;
        let plane = self.plane();
        let mut out = vec![ZERO; n_e * plane];
        let mut report = CgReport::trivial();
        for e in 0..n_e {
            let r = self.cg_solve(&rhs[e * plane..(e + 1) * plane], weights, coils, options, &mut out[e * plane..(e + 1) * plane]);
            report = report.merge(r);
        }
        Ok((out, report))
    }

    fn cg_solve(&self, b: &[C64], weights: &[f64], coils: &[&[C64]], options: &CgOptions, x: &mut [C64]) -> CgReport {
        let n = b.len();
        let dot = |a: &[C64], b: &[C64]| -> C64 { a.iter().zip(b).map(|(u, v)| u.conj() * v).sum() };
        let norm_sqr = |a: &[C64]| -> f64 { a.iter().map(|v| v.norm_sqr()).sum() };

        x.iter_mut().for_each(|v| *v = ZERO);
        let mut r = b.to_vec();
        let rs0 = norm_sqr(&r);
        if rs0 == 0.0 {
            return CgReport::trivial();
        }
        let mut p = r.clone();
        let mut ap = vec![ZERO; n];
        let mut buf = vec![ZERO; n];
        let mut rs = rs0;
        let target = options.tol * options.tol * rs0;
        let mut iterations = 0;
        while iterations < options.max_iter && rs > target {
            self.normal(&p, weights, coils, &mut buf, &mut ap);
            for (a, pv) in ap.iter_mut().zip(&p) {
                *a += pv * options.mu;
            }
            let pap = dot(&p, &ap).re;
            if !(pap > 0.0) {
                break;
            }
            let alpha = rs / pap;
            for i in 0..n {
                x[i] += p[i] * alpha;
                r[i] -= ap[i] * alpha;
            }
            let rs_new = norm_sqr(&r);
            let beta = rs_new / rs;
            for (pv, rv) in p.iter_mut().zip(&r) {
                *pv = rv + *pv * beta;
            }
            rs = rs_new;
            iterations += 1;
        }
        CgReport {
            converged: rs <= target,
            iterations,
            relative_residual: (rs / rs0).sqrt(),
        }
    }
}

/// The masked encoding `A = W^{1/2} F C` for one echo, as an explicit
/// operator pair.
pub struct MaskedEncoding<'a> {
    encoder: &'a SliceEncoder,
    coils: Vec<&'a [C64]>,
    sqrt_weights: Vec<f64>,
}

impl<'a> MaskedEncoding<'a> {
    pub fn new(encoder: &'a SliceEncoder, coils: Vec<&'a [C64]>, weights: &[f64]) -> Result<Self> {
        encoder.check_coils(&coils)?;
        if weights.len() != encoder.h() || weights.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invariant("mask", "one weight in [0, 1] per PE line"));
        }
        Ok(MaskedEncoding {
            encoder,
            coils,
            sqrt_weights: weights.iter().map(|v| v.sqrt()).collect(),
        })
    }

    /// `[h, w]` image to `[coil, pe, ro]` k-space.
    pub fn apply(&self, x: &[C64]) -> Vec<C64> {
        let plane = self.encoder.plane();
        let w = self.encoder.w();
        let mut out = vec![ZERO; self.coils.len() * plane];
        for (c, coil) in self.coils.iter().enumerate() {
            let dst = &mut out[c * plane..(c + 1) * plane];
            for ((d, xv), s) in dst.iter_mut().zip(x).zip(coil.iter()) {
                *d = xv * s;
            }
            self.encoder.fft.forward(dst);
            for (y, sw) in self.sqrt_weights.iter().enumerate() {
                for d in &mut dst[y * w..(y + 1) * w] {
                    *d *= *sw;
                }
            }
        }
        out
    }

    pub fn apply_adjoint(&self, y: &[C64]) -> Vec<C64> {
        let plane = self.encoder.plane();
        let w = self.encoder.w();
        let mut out = vec![ZERO; plane];
        let mut buf = vec![ZERO; plane];
        for (c, coil) in self.coils.iter().enumerate() {
            buf.copy_from_slice(&y[c * plane..(c + 1) * plane]);
            for (row, sw) in self.sqrt_weights.iter().enumerate() {
                for b in &mut buf[row * w..(row + 1) * w] {
                    *b *= *sw;
                }
            }
            self.encoder.fft.inverse(&mut buf);
            for ((o, b), s) in out.iter_mut().zip(&buf).zip(coil.iter()) {
                *o += s.conj() * b;
            }
        }
        out
    }
}

/// Line weights for each slice of a volume.
pub trait SliceWeights: Sync {
    fn weights(&self, slice: usize) -> &[f64];
}

impl SliceWeights for [f64] {
    fn weights(&self, _slice: usize) -> &[f64] {
        self
    }
}

impl SliceWeights for Vec<Vec<f64>> {
    fn weights(&self, slice: usize) -> &[f64] {
        &self[slice]
    }
}

/// CG reconstruction of every slice, parallel over slices.
pub fn reconstruct_volume(
    kspace: &KSpaceData,
    weights: &(impl SliceWeights + ?Sized),
    coils: &CoilSensitivities,
    options: &CgOptions,
) -> Result<(ImageStack, CgReport)> {
    let d = kspace.dims();
    if coils.coils() != d.coils || coils.dims().h != d.pe || coils.dims().w != d.ro || coils.dims().slices != d.slices {
        return Err(Error::Shape("coil maps do not match k-space".into()));
    }
    let vox = kspace.voxel_size_mm();
    let encoder = SliceEncoder::new(d.pe, d.ro, [vox[0], vox[1]]);
    let per_slice: Vec<Result<(Vec<C64>, CgReport)>> = (0..d.slices)
        .into_par_iter()
        .map(|s| encoder.cg_reconstruct(kspace.slice(s), weights.weights(s), &coils.slice_maps(s), options))
        .collect();
    let mut values = Vec::with_capacity(d.slices * d.echoes * d.pe * d.ro);
    let mut report = CgReport::trivial();
    for r in per_slice {
        let (v, rep) = r?;
        values.extend(v);
        report = report.merge(rep);
    }
    if !report.converged {
        log::warn!(
            "CG stopped after {} iterations with relative residual {:.3e}",
            report.iterations,
            report.relative_residual
        );
    }
    let stack = ImageStack::new(
        ImageDims {
            slices: d.slices,
            echoes: d.echoes,
            h: d.pe,
            w: d.ro,
        },
        values,
        kspace.echo_times_ms().to_vec(),
        vox,
    )?;
    Ok((stack, report))
}
