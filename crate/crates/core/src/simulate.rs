//! Corruption of a phantom end to end: motion curve, line plan, k-space and
//! the redundant central acquisitions used by HR/QR.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{central_offset, crop_central_lines, partial_line_counts};
use crate::error::{Error, Result};
use crate::model::{KSpaceData, MotionCurve, RigidPose};
use crate::motion::{
    add_noise, augmented_curve, build_plan, center_median, corrupt, fit_pca, synthetic_bank, B0Model, CorruptionPlan,
    SpherePoints, SyntheticMotion, DEFAULT_B0_GAIN, DEFAULT_RESAMPLE_LEN, DEFAULT_SPHERE_POINTS, DEFAULT_THRESHOLD_MM,
    HEAD_RADIUS_MM,
};
use crate::motion_csv::read_motion_csv;
use crate::phantom::Phantom;
use crate::schedule::{build_schedule, sequential_order};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CurveSource {
    /// PCA-augmented draw from a bank of synthetic curves.
    Synthetic {
        bank_size: usize,
        #[serde(default)]
        motion: SyntheticMotion,
    },
    /// A recorded curve; it is median-centered before use.
    Csv { path: PathBuf },
    Still,
}

impl Default for CurveSource {
    fn default() -> Self {
        CurveSource::Synthetic {
            bank_size: 16,
            motion: SyntheticMotion::default(),
        }
    }
}

/// Motion of the half- and quarter-resolution scans.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartialMotion {
    /// Separate curves; a recorded curve is reused as is.
    Independent,
    Clean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub curve: CurveSource,
    pub amplitude_scale: f64,
    pub threshold_mm: f64,
    pub b0_gain: f64,
    pub noise_std: f64,
    pub sphere_points: usize,
    pub sphere_radius_mm: f64,
    pub resample_len: usize,
    pub partial_motion: PartialMotion,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            curve: CurveSource::default(),
            amplitude_scale: 1.0,
            threshold_mm: DEFAULT_THRESHOLD_MM,
            b0_gain: DEFAULT_B0_GAIN,
            noise_std: 0.0,
            sphere_points: DEFAULT_SPHERE_POINTS,
            sphere_radius_mm: HEAD_RADIUS_MM,
            resample_len: DEFAULT_RESAMPLE_LEN,
            partial_motion: PartialMotion::Independent,
            seed: 0,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude_scale >= 0.0) || !self.amplitude_scale.is_finite() {
            return Err(Error::invariant("amplitude_scale", "must be finite and >= 0"));
        }
        if self.threshold_mm.is_nan() || self.threshold_mm < 0.0 {
            return Err(Error::invariant("threshold_mm", "must be >= 0"));
        }
        if !(self.b0_gain >= 0.0) || !(self.noise_std >= 0.0) {
            return Err(Error::invariant("b0_gain", "gain and noise must be >= 0"));
        }
        if let CurveSource::Synthetic { bank_size, .. } = &self.curve {
            if *bank_size < 2 {
                return Err(Error::invariant("curve.bank_size", "PCA needs at least 2 curves"));
            }
        }
        Ok(())
    }
}

pub struct Simulation {
    pub kspace: KSpaceData,
    pub kspace_half: KSpaceData,
    pub kspace_quarter: KSpaceData,
    pub plan: CorruptionPlan,
    pub half_plan: CorruptionPlan,
    pub quarter_plan: CorruptionPlan,
    /// The centered curve before amplitude scaling.
    pub curve: MotionCurve,
    pub b0: B0Model,
}

/// Plan of a scan acquiring only `count` central lines, timed by its own
/// sequential schedule. Lines outside the acquired band stay still.
pub fn partial_plan(
    curve: &MotionCurve,
    n_slices: usize,
    n_pe: usize,
    count: usize,
    tr_ms: f64,
    threshold_mm: f64,
    b0: &B0Model,
    points: &SpherePoints,
) -> Result<CorruptionPlan> {
    let sched = build_schedule(n_slices, count, tr_ms, &sequential_order(count))?;
    let off = central_offset(n_pe, count);
    let mut poses = vec![RigidPose::IDENTITY; n_slices * n_pe];
    let mut times = vec![0.0; n_slices * n_pe];
    for s in 0..n_slices {
        for r in 0..count {
            let t = sched.time_s(s, r);
            poses[s * n_pe + off + r] = curve.sample(t).0;
            times[s * n_pe + off + r] = t;
        }
    }
    CorruptionPlan::from_line_poses(n_slices, n_pe, &poses, &times, threshold_mm, b0, points)
}

pub fn simulate(phantom: &Phantom, tr_ms: f64, config: &SimulationConfig) -> Result<Simulation> {
    config.validate()?;
    let d = phantom.image.dims();
    let points = SpherePoints::new(config.sphere_radius_mm, config.sphere_points)?;
    let sched = build_schedule(d.slices, d.h, tr_ms, &sequential_order(d.h))?;
    let duration = sched.duration_s() + tr_ms / 1000.0;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let (curve, basis) = match &config.curve {
        CurveSource::Synthetic { bank_size, motion } => {
            let bank = synthetic_bank(*bank_size, duration, motion, &mut rng)?;
            let basis = fit_pca(&bank, config.resample_len)?;
            (augmented_curve(&basis, &points, &mut rng)?, Some(basis))
        }
        CurveSource::Csv { path } => (center_median(&read_motion_csv(path)?, &points), None),
        CurveSource::Still => (MotionCurve::still(), None),
    };
    let b0 = if config.b0_gain > 0.0 {
        B0Model::random(&phantom.roi, config.b0_gain, &mut rng)?
    } else {
        B0Model::zero()
    };

    let scaled = curve.scaled(config.amplitude_scale);
    let plan = build_plan(&scaled, &sched, config.threshold_mm, &b0, &points)?;
    let kspace = corrupt(&phantom.image, &phantom.coils, &phantom.field, &plan, tr_ms)?;

    let (n_half, n_quarter) = partial_line_counts(d.h);
    let mut partial = |count: usize| -> Result<(KSpaceData, CorruptionPlan)> {
        let c = match (config.partial_motion, &basis) {
            (PartialMotion::Clean, _) => MotionCurve::still(),
            (PartialMotion::Independent, Some(b)) => augmented_curve(b, &points, &mut rng)?,
            (PartialMotion::Independent, None) => curve.clone(),
        };
        let p = partial_plan(
            &c.scaled(config.amplitude_scale),
            d.slices,
            d.h,
            count,
            tr_ms,
            config.threshold_mm,
            &b0,
            &points,
        )?;
        let k = corrupt(&phantom.image, &phantom.coils, &phantom.field, &p, tr_ms)?;
        Ok((crop_central_lines(&k, count)?, p))
    };
    let (kspace_half, half_plan) = partial(n_half)?;
    let (kspace_quarter, quarter_plan) = partial(n_quarter)?;

    let (kspace, kspace_half, kspace_quarter) = if config.noise_std > 0.0 {
        (
            add_noise(kspace, config.noise_std, &mut rng)?,
            add_noise(kspace_half, config.noise_std, &mut rng)?,
            add_noise(kspace_quarter, config.noise_std, &mut rng)?,
        )
    } else {
        (kspace, kspace_half, kspace_quarter)
    };

    Ok(Simulation {
        kspace,
        kspace_half,
        kspace_quarter,
        plan,
        half_plan,
        quarter_plan,
        curve,
        b0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate, PhantomSpec};

    fn small() -> (Phantom, PhantomSpec) {
        let spec = PhantomSpec {
            matrix: 32,
            n_slices: 2,
            n_echoes: 4,
            ..PhantomSpec::default()
        };
        (generate(&spec).unwrap(), spec)
    }

    #[test]
    fn zero_amplitude_is_static() {
        let (p, spec) = small();
        let cfg = SimulationConfig {
            amplitude_scale: 0.0,
            ..SimulationConfig::default()
        };
        let sim = simulate(&p, spec.tr_ms, &cfg).unwrap();
        assert_eq!(sim.plan.corrupted_count(), 0);
        let clean = corrupt(&p.image, &p.coils, &p.field, &CorruptionPlan::identity(2, 32), spec.tr_ms).unwrap();
        assert_eq!(sim.kspace.samples(), clean.samples());
        assert_eq!(sim.kspace_half.dims().pe, 16);
        assert_eq!(sim.kspace_quarter.dims().pe, 8);
    }

    #[test]
    fn same_seed_same_kspace() {
        let (p, spec) = small();
        let cfg = SimulationConfig {
            amplitude_scale: 3.0,
            seed: 5,
            ..SimulationConfig::default()
        };
        let a = simulate(&p, spec.tr_ms, &cfg).unwrap();
        let b = simulate(&p, spec.tr_ms, &cfg).unwrap();
        assert_eq!(a.kspace.samples(), b.kspace.samples());
        assert_eq!(a.kspace_half.samples(), b.kspace_half.samples());
    }

    #[test]
    fn larger_amplitude_excludes_at_least_as_many_lines() {
        let (p, spec) = small();
        let counts: Vec<usize> = [0.5, 1.0, 2.0, 4.0]
            .iter()
            .map(|a| {
                let cfg = SimulationConfig {
                    amplitude_scale: *a,
                    seed: 2,
                    ..SimulationConfig::default()
                };
                simulate(&p, spec.tr_ms, &cfg).unwrap().plan.corrupted_count()
            })
            .collect();
        assert!(counts.windows(2).all(|w| w[0] <= w[1]), "{counts:?}");
    }

    #[test]
    fn partial_plan_only_moves_central_lines() {
        let pts = SpherePoints::head();
        let curve = MotionCurve::new(
            vec![0.0, 1000.0],
            vec![RigidPose { tx_mm: 5.0, ..RigidPose::IDENTITY }; 2],
        )
        .unwrap();
        let plan = partial_plan(&curve, 2, 16, 8, 2300.0, 2.0, &B0Model::zero(), &pts).unwrap();
        for l in plan.lines() {
            assert_eq!(l.corrupted, (4..12).contains(&l.pe));
        }
    }
}
