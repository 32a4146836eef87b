//! Deterministic multi-echo ellipse phantom with coil maps and a B0 field.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    CoilSensitivities, FieldMap, ImageDims, ImageStack, MapDims, ParameterMaps, VolumeMask, C64,
};
use crate::relaxometry::DEFAULT_T2STAR_MAX_MS;

/// Gyromagnetic ratio over 2π, Hz/T.
pub const GAMMA_HZ_PER_T: f64 = 42.577e6;

/// Converts a field offset in μT to an angular frequency in rad/ms.
pub fn microtesla_to_rad_per_ms(b_ut: f64) -> f64 {
    2.0 * std::f64::consts::PI * GAMMA_HZ_PER_T * b_ut * 1e-6 / 1000.0
}

/// Inverse of [`microtesla_to_rad_per_ms`].
pub fn rad_per_ms_to_microtesla(omega: f64) -> f64 {
    omega * 1e9 / (2.0 * std::f64::consts::PI * GAMMA_HZ_PER_T)
}

/// Ellipse in normalized field-of-view coordinates (`[-1, 1]` on both axes,
/// `y` along rows).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ellipse {
    pub cy: f64,
    pub cx: f64,
    pub ry: f64,
    pub rx: f64,
    #[serde(default)]
    pub angle_deg: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }

    fn scaled(&self, f: f64) -> Ellipse {
        Ellipse {
            cy: self.cy * f,
            cx: self.cx * f,
            ry: self.ry * f,
            rx: self.rx * f,
            angle_deg: self.angle_deg,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tissue {
    pub name: String,
    pub ellipses: Vec<Ellipse>,
    pub t2star_ms: f64,
    pub s0: f64,
}

/// Shell, body and lesions. Later entries are painted over earlier ones.
pub fn default_tissues() -> Vec<Tissue> {
    vec![
        Tissue {
            name: "shell".into(),
            ellipses: vec![Ellipse { cy: 0.0, cx: 0.0, ry: 0.82, rx: 0.68, angle_deg: 0.0 }],
            t2star_ms: 45.0,
            s0: 80.0,
        },
        Tissue {
            name: "body".into(),
            ellipses: vec![Ellipse { cy: 0.0, cx: 0.0, ry: 0.72, rx: 0.58, angle_deg: 0.0 }],
            t2star_ms: 65.0,
            s0: 100.0,
        },
        Tissue {
            name: "lesions".into(),
            ellipses: vec![
                Ellipse { cy: -0.3, cx: 0.22, ry: 0.14, rx: 0.1, angle_deg: 20.0 },
                Ellipse { cy: 0.25, cx: -0.2, ry: 0.1, rx: 0.16, angle_deg: -30.0 },
                Ellipse { cy: 0.4, cx: 0.25, ry: 0.07, rx: 0.07, angle_deg: 0.0 },
            ],
            t2star_ms: 25.0,
            s0: 90.0,
        },
    ]
}

/// B0 offset polynomial in μT over physical in-plane position in metres,
/// `offset + gx*x + gy*y + quad*(x² + y²)`, scaled per slice by
/// `slice_scale[0] + slice_scale[1] * slice`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct B0Spec {
    pub offset_ut: f64,
    pub grad_x_ut_per_m: f64,
    pub grad_y_ut_per_m: f64,
    pub quad_ut_per_m2: f64,
    pub slice_scale: [f64; 2],
}

impl Default for B0Spec {
    fn default() -> Self {
        B0Spec {
            offset_ut: 0.5,
            grad_x_ut_per_m: 30.0,
            grad_y_ut_per_m: 5.0,
            quad_ut_per_m2: 30.0,
            slice_scale: [0.5, 0.4],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub matrix: usize,
    pub n_slices: usize,
    pub n_coils: usize,
    pub n_echoes: usize,
    pub te1_ms: f64,
    pub dte_ms: f64,
    pub tr_ms: f64,
    pub voxel_size_mm: [f64; 3],
    pub tissues: Vec<Tissue>,
    pub b0: B0Spec,
    /// Relative shrink of the object per slice going superior.
    pub slice_shrink: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            matrix: 92,
            n_slices: 8,
            n_coils: 4,
            n_echoes: 12,
            te1_ms: 5.0,
            dte_ms: 5.0,
            tr_ms: 2300.0,
            voxel_size_mm: [2.0, 2.0, 3.0],
            tissues: default_tissues(),
            b0: B0Spec::default(),
            slice_shrink: 0.02,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn echo_times_ms(&self) -> Vec<f64> {
        (0..self.n_echoes).map(|e| self.te1_ms + e as f64 * self.dte_ms).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.matrix < 4 || self.matrix % 2 != 0 {
            return Err(Error::invariant("matrix", "must be even and at least 4"));
        }
        if self.n_slices == 0 || self.n_coils == 0 {
            return Err(Error::invariant("n_slices", "slice and coil counts must be positive"));
        }
        if self.n_echoes < 3 {
            return Err(Error::invariant("n_echoes", "at least 3 echoes are needed"));
        }
        if !(self.te1_ms > 0.0 && self.dte_ms > 0.0 && self.tr_ms > 0.0) {
            return Err(Error::invariant("te1_ms", "echo spacing and TR must be positive"));
        }
        if self.voxel_size_mm.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::invariant("voxel_size_mm", "must be positive"));
        }
        if !(0.0..0.1).contains(&self.slice_shrink) {
            return Err(Error::invariant("slice_shrink", "must lie in [0, 0.1)"));
        }
        if self.tissues.is_empty() {
            return Err(Error::invariant("tissues", "at least one tissue is needed"));
        }
        for t in &self.tissues {
            if !(t.t2star_ms > 0.0) || !(t.s0 >= 0.0) {
                return Err(Error::invariant("tissues", format!("{}: T2* must be > 0 and s0 >= 0", t.name)));
            }
            for e in &t.ellipses {
                let reach = e.rx.max(e.ry);
                if !(e.rx > 0.0 && e.ry > 0.0) || e.cy.abs() + reach > 1.0 || e.cx.abs() + reach > 1.0 {
                    return Err(Error::invariant(
                        "tissues",
                        format!("{}: ellipse must have positive radii and lie inside the field of view", t.name),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub image: ImageStack,
    pub coils: CoilSensitivities,
    pub field: FieldMap,
    pub truth: ParameterMaps,
    pub roi: VolumeMask,
}

pub fn generate(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let n = spec.matrix;
    let plane = n * n;
    let s_count = spec.n_slices;
    let tes = spec.echo_times_ms();
    let map_dims = MapDims { slices: s_count, h: n, w: n };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // normalized coordinate of pixel centers
    let norm = |i: usize| (i as f64 + 0.5) / n as f64 * 2.0 - 1.0;
    let c = (n as f64 - 1.0) / 2.0;

    let mut tissue_index = vec![usize::MAX; s_count * plane];
    for s in 0..s_count {
        let f = 1.0 - spec.slice_shrink * s as f64;
        for (ti, t) in spec.tissues.iter().enumerate() {
            let ellipses: Vec<Ellipse> = t.ellipses.iter().map(|e| e.scaled(f)).collect();
            for y in 0..n {
                for x in 0..n {
                    if ellipses.iter().any(|e| e.contains(norm(y), norm(x))) {
                        tissue_index[s * plane + y * n + x] = ti;
                    }
                }
            }
        }
    }
    let roi_values: Vec<bool> = tissue_index.iter().map(|t| *t != usize::MAX).collect();

    let mut t2 = vec![DEFAULT_T2STAR_MAX_MS; s_count * plane];
    let mut s0 = vec![0.0; s_count * plane];
    for (v, t) in tissue_index.iter().enumerate() {
        if let Some(tissue) = spec.tissues.get(*t) {
            t2[v] = tissue.t2star_ms;
            s0[v] = tissue.s0;
        }
    }

    let idims = ImageDims { slices: s_count, echoes: spec.n_echoes, h: n, w: n };
    let mut values = vec![C64::new(0.0, 0.0); idims.len()];
    for s in 0..s_count {
        for (e, te) in tes.iter().enumerate() {
            for p in 0..plane {
                let v = s * plane + p;
                if roi_values[v] {
                    values[idims.index(s, e, 0, 0) + p] = C64::new(s0[v] * (-te / t2[v]).exp(), 0.0);
                }
            }
        }
    }

    // coils on a ring around the object
    let phases: Vec<(f64, f64)> = (0..spec.n_coils)
        .map(|_| (rng.random_range(-std::f64::consts::PI..std::f64::consts::PI), rng.random_range(0.5..1.5)))
        .collect();
    let mut maps = vec![C64::new(0.0, 0.0); spec.n_coils * s_count * plane];
    for s in 0..s_count {
        for y in 0..n {
            for x in 0..n {
                let (py, px) = (norm(y), norm(x));
                let raw: Vec<C64> = (0..spec.n_coils)
                    .map(|k| {
                        let a = 2.0 * std::f64::consts::PI * k as f64 / spec.n_coils as f64;
                        let (cy, cx) = (1.3 * a.sin(), 1.3 * a.cos());
                        let d2 = (py - cy).powi(2) + (px - cx).powi(2);
                        let (p0, slope) = phases[k];
                        let phase = p0 + slope * (px * a.cos() + py * a.sin()) + 0.05 * s as f64;
                        C64::from_polar((-d2 / (2.0 * 0.8f64.powi(2))).exp(), phase)
                    })
                    .collect();
                let sos = raw.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
                for (k, v) in raw.iter().enumerate() {
                    maps[(k * s_count + s) * plane + y * n + x] = v / sos;
                }
            }
        }
    }

    let b0 = &spec.b0;
    let mut omega = vec![0.0; s_count * plane];
    for s in 0..s_count {
        let scale = b0.slice_scale[0] + b0.slice_scale[1] * s as f64;
        for y in 0..n {
            let ym = (y as f64 - c) * spec.voxel_size_mm[0] * 1e-3;
            for x in 0..n {
                let v = s * plane + y * n + x;
                if !roi_values[v] {
                    continue;
                }
                let xm = (x as f64 - c) * spec.voxel_size_mm[1] * 1e-3;
                let b = b0.offset_ut + b0.grad_x_ut_per_m * xm + b0.grad_y_ut_per_m * ym + b0.quad_ut_per_m2 * (xm * xm + ym * ym);
                omega[v] = microtesla_to_rad_per_ms(scale * b);
            }
        }
    }

    let valid = roi_values.clone();
    Ok(Phantom {
        image: ImageStack::new(idims, values, tes, spec.voxel_size_mm)?,
        coils: CoilSensitivities::new(spec.n_coils, map_dims, maps)?,
        field: FieldMap::new(map_dims, omega)?,
        truth: ParameterMaps::new(map_dims, t2, s0, valid)?,
        roi: VolumeMask::new(map_dims, roi_values)?,
    })
}
