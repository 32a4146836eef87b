//! Domain types shared by every stage of the pipeline.
//!
//! Dimension conventions are fixed: k-space is `[slice, echo, coil, pe, ro]`,
//! images are `[slice, echo, h, w]`, per-voxel maps are `[slice, h, w]`, and
//! coil maps are `[coil, slice, h, w]`, all row-major. Echo times are in ms,
//! field offsets in rad/ms, lengths in mm, schedule times in s.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = num_complex::Complex64;

fn check_echo_times(tes: &[f64]) -> Result<()> {
    if tes.len() < 3 {
        return Err(Error::invariant(
            "echo_times_ms",
            format!("need at least 3 echoes, got {}", tes.len()),
        ));
    }
    if tes.iter().any(|t| !t.is_finite() || *t <= 0.0) {
        return Err(Error::invariant("echo_times_ms", "all echo times must be finite and > 0"));
    }
    if tes.windows(2).any(|p| p[1] <= p[0]) {
        return Err(Error::invariant("echo_times_ms", "echo times must be strictly increasing"));
    }
    Ok(())
}

fn check_voxel(voxel: &[f64; 3]) -> Result<()> {
    if voxel.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(Error::invariant("voxel_size_mm", "voxel sizes must be finite and > 0"));
    }
    Ok(())
}

fn check_positive(field: &str, dims: &[usize]) -> Result<()> {
    if dims.iter().any(|d| *d == 0) {
        return Err(Error::invariant(field, format!("all dimensions must be positive, got {dims:?}")));
    }
    Ok(())
}

fn check_len(field: &str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::Shape(format!("{field}: expected {expected} values, found {found}")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KSpaceDims {
    pub slices: usize,
    pub echoes: usize,
    pub coils: usize,
    pub pe: usize,
    pub ro: usize,
}

impl KSpaceDims {
    pub fn len(&self) -> usize {
        self.slices * self.slice_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of samples belonging to one slice (`echo * coil * pe * ro`).
    pub fn slice_len(&self) -> usize {
        self.echoes * self.coils * self.pe * self.ro
    }

    #[inline]
    pub fn index(&self, slice: usize, echo: usize, coil: usize, pe: usize, ro: usize) -> usize {
        (((slice * self.echoes + echo) * self.coils + coil) * self.pe + pe) * self.ro + ro
    }

    pub fn as_array(&self) -> [usize; 5] {
        [self.slices, self.echoes, self.coils, self.pe, self.ro]
    }
}

/// Multi-echo, multi-coil, multi-slice Cartesian k-space.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceData {
    dims: KSpaceDims,
    samples: Vec<C64>,
    echo_times_ms: Vec<f64>,
    tr_ms: f64,
    voxel_size_mm: [f64; 3],
}

impl KSpaceData {
    pub fn new(
        dims: KSpaceDims,
        samples: Vec<C64>,
        echo_times_ms: Vec<f64>,
        tr_ms: f64,
        voxel_size_mm: [f64; 3],
    ) -> Result<Self> {
        check_positive("dims", &dims.as_array())?;
        check_echo_times(&echo_times_ms)?;
        check_len("echo_times_ms", dims.echoes, echo_times_ms.len())?;
        if dims.pe % 2 != 0 {
            return Err(Error::invariant("dims.pe", format!("PE count must be even, got {}", dims.pe)));
        }
        if !tr_ms.is_finite() || tr_ms <= 0.0 {
            return Err(Error::invariant("tr_ms", "repetition time must be finite and > 0"));
        }
        check_voxel(&voxel_size_mm)?;
        check_len("samples", dims.len(), samples.len())?;
        Ok(KSpaceData {
            dims,
            samples,
            echo_times_ms,
            tr_ms,
            voxel_size_mm,
        })
    }

    pub fn dims(&self) -> KSpaceDims {
        self.dims
    }

    pub fn samples(&self) -> &[C64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<C64> {
        self.samples
    }

    /// All samples of one slice, laid out `[echo, coil, pe, ro]`.
    pub fn slice(&self, slice: usize) -> &[C64] {
        let n = self.dims.slice_len();
        &self.samples[slice * n..(slice + 1) * n]
    }

    pub fn echo_times_ms(&self) -> &[f64] {
        &self.echo_times_ms
    }

    pub fn tr_ms(&self) -> f64 {
        self.tr_ms
    }

    pub fn voxel_size_mm(&self) -> [f64; 3] {
        self.voxel_size_mm
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageDims {
    pub slices: usize,
    pub echoes: usize,
    pub h: usize,
    pub w: usize,
}

impl ImageDims {
    pub fn len(&self) -> usize {
        self.slices * self.echoes * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn index(&self, slice: usize, echo: usize, row: usize, col: usize) -> usize {
        ((slice * self.echoes + echo) * self.h + row) * self.w + col
    }
}

/// Complex multi-echo images, `[slice, echo, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageStack {
    dims: ImageDims,
    values: Vec<C64>,
    echo_times_ms: Vec<f64>,
    voxel_size_mm: [f64; 3],
}

impl ImageStack {
    pub fn new(
        dims: ImageDims,
        values: Vec<C64>,
        echo_times_ms: Vec<f64>,
        voxel_size_mm: [f64; 3],
    ) -> Result<Self> {
        check_positive("dims", &[dims.slices, dims.echoes, dims.h, dims.w])?;
        check_echo_times(&echo_times_ms)?;
        check_len("echo_times_ms", dims.echoes, echo_times_ms.len())?;
        check_voxel(&voxel_size_mm)?;
        check_len("values", dims.len(), values.len())?;
        Ok(ImageStack {
            dims,
            values,
            echo_times_ms,
            voxel_size_mm,
        })
    }

    pub fn dims(&self) -> ImageDims {
        self.dims
    }

    pub fn values(&self) -> &[C64] {
        &self.values
    }

    /// One slice, laid out `[echo, h, w]`.
    pub fn slice(&self, slice: usize) -> &[C64] {
        let n = self.dims.echoes * self.dims.plane();
        &self.values[slice * n..(slice + 1) * n]
    }

    pub fn echo_times_ms(&self) -> &[f64] {
        &self.echo_times_ms
    }

    pub fn voxel_size_mm(&self) -> [f64; 3] {
        self.voxel_size_mm
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapDims {
    pub slices: usize,
    pub h: usize,
    pub w: usize,
}

impl MapDims {
    pub fn len(&self) -> usize {
        self.slices * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn index(&self, slice: usize, row: usize, col: usize) -> usize {
        (slice * self.h + row) * self.w + col
    }
}

/// Off-resonance map in rad/ms, `[slice, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldMap {
    dims: MapDims,
    omega: Vec<f64>,
}

impl FieldMap {
    pub fn new(dims: MapDims, omega: Vec<f64>) -> Result<Self> {
        check_positive("dims", &[dims.slices, dims.h, dims.w])?;
        check_len("omega", dims.len(), omega.len())?;
        if omega.iter().any(|v| !v.is_finite()) {
            return Err(Error::invariant("omega", "field map must be finite"));
        }
        Ok(FieldMap { dims, omega })
    }

    pub fn zeros(dims: MapDims) -> Self {
        FieldMap {
            dims,
            omega: vec![0.0; dims.len()],
        }
    }

    pub fn dims(&self) -> MapDims {
        self.dims
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn slice(&self, slice: usize) -> &[f64] {
        let n = self.dims.plane();
        &self.omega[slice * n..(slice + 1) * n]
    }
}

/// Boolean per-voxel mask, `[slice, h, w]`. Used for the region of interest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VolumeMask {
    dims: MapDims,
    inside: Vec<bool>,
}

impl VolumeMask {
    pub fn new(dims: MapDims, inside: Vec<bool>) -> Result<Self> {
        check_positive("dims", &[dims.slices, dims.h, dims.w])?;
        check_len("mask", dims.len(), inside.len())?;
        Ok(VolumeMask { dims, inside })
    }

    pub fn dims(&self) -> MapDims {
        self.dims
    }

    pub fn values(&self) -> &[bool] {
        &self.inside
    }

    pub fn slice(&self, slice: usize) -> &[bool] {
        let n = self.dims.plane();
        &self.inside[slice * n..(slice + 1) * n]
    }

    pub fn count(&self) -> usize {
        self.inside.iter().filter(|b| **b).count()
    }
}

/// Complex receive sensitivities, `[coil, slice, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoilSensitivities {
    coils: usize,
    dims: MapDims,
    maps: Vec<C64>,
}

impl CoilSensitivities {
    pub fn new(coils: usize, dims: MapDims, maps: Vec<C64>) -> Result<Self> {
        check_positive("dims", &[coils, dims.slices, dims.h, dims.w])?;
        check_len("maps", coils * dims.len(), maps.len())?;
        if maps.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::invariant("maps", "coil maps must be finite"));
        }
        Ok(CoilSensitivities { coils, dims, maps })
    }

    /// A single coil with unit sensitivity everywhere.
    pub fn uniform(dims: MapDims) -> Self {
        CoilSensitivities {
            coils: 1,
            dims,
            maps: vec![C64::new(1.0, 0.0); dims.len()],
        }
    }

    pub fn coils(&self) -> usize {
        self.coils
    }

    pub fn dims(&self) -> MapDims {
        self.dims
    }

    pub fn maps(&self) -> &[C64] {
        &self.maps
    }

    pub fn map(&self, coil: usize, slice: usize) -> &[C64] {
        let n = self.dims.plane();
        let start = (coil * self.dims.slices + slice) * n;
        &self.maps[start..start + n]
    }

    /// All coil maps of one slice, one `Vec` per coil.
    pub fn slice_maps(&self, slice: usize) -> Vec<&[C64]> {
        (0..self.coils).map(|c| self.map(c, slice)).collect()
    }

    /// Largest deviation of the coil sum-of-squares from 1 inside `support`.
    pub fn normalization_error(&self, support: &VolumeMask) -> f64 {
        let n = self.dims.plane();
        let mut worst: f64 = 0.0;
        for s in 0..self.dims.slices {
            for (v, inside) in support.slice(s).iter().enumerate().take(n) {
                if !*inside {
                    continue;
                }
                let sos: f64 = (0..self.coils).map(|c| self.map(c, s)[v].norm_sqr()).sum();
                worst = worst.max((sos - 1.0).abs());
            }
        }
        worst
    }
}

/// Voxel-wise T2* and S0 maps with a fit-validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterMaps {
    dims: MapDims,
    t2star_ms: Vec<f64>,
    s0: Vec<f64>,
    valid: Vec<bool>,
}

impl ParameterMaps {
    pub fn new(dims: MapDims, t2star_ms: Vec<f64>, s0: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        check_positive("dims", &[dims.slices, dims.h, dims.w])?;
        check_len("t2star_ms", dims.len(), t2star_ms.len())?;
        check_len("s0", dims.len(), s0.len())?;
        check_len("validity", dims.len(), valid.len())?;
        for ((t, s), ok) in t2star_ms.iter().zip(&s0).zip(&valid) {
            if !t.is_finite() || !s.is_finite() {
                return Err(Error::invariant("t2star_ms", "maps must be finite"));
            }
            if *ok && *t <= 0.0 {
                return Err(Error::invariant("t2star_ms", "T2* must be > 0 where the fit is valid"));
            }
        }
        Ok(ParameterMaps {
            dims,
            t2star_ms,
            s0,
            valid,
        })
    }

    pub fn dims(&self) -> MapDims {
        self.dims
    }

    pub fn t2star_ms(&self) -> &[f64] {
        &self.t2star_ms
    }

    pub fn s0(&self) -> &[f64] {
        &self.s0
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn t2star_slice(&self, slice: usize) -> &[f64] {
        let n = self.dims.plane();
        &self.t2star_ms[slice * n..(slice + 1) * n]
    }

    pub fn valid_slice(&self, slice: usize) -> &[bool] {
        let n = self.dims.plane();
        &self.valid[slice * n..(slice + 1) * n]
    }
}

/// Identifies which slices share an exclusion mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GroupId {
    Even,
    Odd,
    Slice(usize),
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupId::Even => f.write_str("even"),
            GroupId::Odd => f.write_str("odd"),
            GroupId::Slice(s) => write!(f, "slice_{s}"),
        }
    }
}

impl FromStr for GroupId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "even" => Ok(GroupId::Even),
            "odd" => Ok(GroupId::Odd),
            other => other
                .strip_prefix("slice_")
                .and_then(|n| n.parse().ok())
                .map(GroupId::Slice)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown group id {other:?}"))),
        }
    }
}

impl Serialize for GroupId {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for GroupId {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Per-PE-line weights in `[0, 1]`; 1 keeps a line, 0 excludes it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExclusionMask {
    pub group: GroupId,
    weights: Vec<f64>,
}

impl ExclusionMask {
    pub fn new(group: GroupId, weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::invariant("weights", "mask weights must lie in [0, 1]"));
        }
        Ok(ExclusionMask { group, weights })
    }

    pub fn ones(group: GroupId, n_pe: usize) -> Self {
        ExclusionMask {
            group,
            weights: vec![1.0; n_pe],
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Six rigid-body parameters: translations in mm, rotations in degrees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RigidPose {
    pub tx_mm: f64,
    pub ty_mm: f64,
    pub tz_mm: f64,
    pub rx_deg: f64,
    pub ry_deg: f64,
    pub rz_deg: f64,
}

impl RigidPose {
    pub const IDENTITY: RigidPose = RigidPose {
        tx_mm: 0.0,
        ty_mm: 0.0,
        tz_mm: 0.0,
        rx_deg: 0.0,
        ry_deg: 0.0,
        rz_deg: 0.0,
    };

    pub fn translation(tx_mm: f64, ty_mm: f64, tz_mm: f64) -> Self {
        RigidPose {
            tx_mm,
            ty_mm,
            tz_mm,
            ..Self::IDENTITY
        }
    }

    pub fn to_array(self) -> [f64; 6] {
        [self.tx_mm, self.ty_mm, self.tz_mm, self.rx_deg, self.ry_deg, self.rz_deg]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        RigidPose {
            tx_mm: a[0],
            ty_mm: a[1],
            tz_mm: a[2],
            rx_deg: a[3],
            ry_deg: a[4],
            rz_deg: a[5],
        }
    }

    /// Parameter-wise difference `self - other`.
    pub fn minus(self, other: RigidPose) -> Self {
        let (a, b) = (self.to_array(), other.to_array());
        RigidPose::from_array(std::array::from_fn(|i| a[i] - b[i]))
    }

    pub fn scaled(self, factor: f64) -> Self {
        let a = self.to_array();
        RigidPose::from_array(a.map(|v| v * factor))
    }

    pub fn lerp(self, other: RigidPose, t: f64) -> Self {
        let (a, b) = (self.to_array(), other.to_array());
        RigidPose::from_array(std::array::from_fn(|i| a[i] + (b[i] - a[i]) * t))
    }

    pub fn is_identity(&self) -> bool {
        self.to_array().iter().all(|v| *v == 0.0)
    }
}

/// Rigid-motion time series.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionCurve {
    t_s: Vec<f64>,
    poses: Vec<RigidPose>,
}

impl MotionCurve {
    pub fn new(t_s: Vec<f64>, poses: Vec<RigidPose>) -> Result<Self> {
        if t_s.is_empty() {
            return Err(Error::invariant("t_s", "motion curve needs at least one sample"));
        }
        check_len("poses", t_s.len(), poses.len())?;
        if t_s.iter().any(|t| !t.is_finite())
            || poses.iter().any(|p| p.to_array().iter().any(|v| !v.is_finite()))
        {
            return Err(Error::invariant("motion curve", "all values must be finite"));
        }
        if t_s.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invariant("t_s", "sample times must be strictly increasing"));
        }
        Ok(MotionCurve { t_s, poses })
    }

    /// Motionless curve with one sample at `t = 0`.
    pub fn still() -> Self {
        MotionCurve {
            t_s: vec![0.0],
            poses: vec![RigidPose::IDENTITY],
        }
    }

    pub fn len(&self) -> usize {
        self.t_s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_s.is_empty()
    }

    pub fn t_s(&self) -> &[f64] {
        &self.t_s
    }

    pub fn poses(&self) -> &[RigidPose] {
        &self.poses
    }

    pub fn channel(&self, index: usize) -> Vec<f64> {
        self.poses.iter().map(|p| p.to_array()[index]).collect()
    }

    /// Linear interpolation at `t`; times outside the support clamp to the
    /// nearest endpoint. The flag reports whether clamping happened.
    pub fn sample(&self, t: f64) -> (RigidPose, bool) {
        let n = self.t_s.len();
        if t <= self.t_s[0] {
            return (self.poses[0], t < self.t_s[0]);
        }
        if t >= self.t_s[n - 1] {
            return (self.poses[n - 1], t > self.t_s[n - 1]);
        }
        let hi = self.t_s.partition_point(|x| *x <= t);
        let lo = hi - 1;
        let frac = (t - self.t_s[lo]) / (self.t_s[hi] - self.t_s[lo]);
        (self.poses[lo].lerp(self.poses[hi], frac), false)
    }

    /// Every pose multiplied by `factor`; times unchanged.
    pub fn scaled(&self, factor: f64) -> Self {
        MotionCurve {
            t_s: self.t_s.clone(),
            poses: self.poses.iter().map(|p| p.scaled(factor)).collect(),
        }
    }

    pub(crate) fn with_poses(&self, poses: Vec<RigidPose>) -> Self {
        debug_assert_eq!(poses.len(), self.t_s.len());
        MotionCurve {
            t_s: self.t_s.clone(),
            poses,
        }
    }
}
