//! Reference motion-correction methods: bootstrap aggregation over random
//! variable-density line masks, and averaging of redundant center-of-k-space
//! acquisitions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{keep_center_weights, reconstruct_volume, CgOptions};
use crate::error::{Error, Result};
use crate::model::{CoilSensitivities, ImageStack, KSpaceData, KSpaceDims, C64};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OrbaConfig {
    pub n_masks: usize,
    pub exclusion_rate: f64,
    pub keep_center: bool,
    pub seed: u64,
    /// Peak extra keep-weight of central lines.
    pub density_beta: f64,
    /// Width of the central density bump as a fraction of the line count.
    pub density_sigma_fraction: f64,
}

impl Default for OrbaConfig {
    fn default() -> Self {
        OrbaConfig {
            n_masks: 15,
            exclusion_rate: 0.5,
            keep_center: true,
            seed: 0,
            density_beta: 2.0,
            density_sigma_fraction: 0.125,
        }
    }
}

impl OrbaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_masks == 0 {
            return Err(Error::invariant("n_masks", "must be positive"));
        }
        if !(self.exclusion_rate >= 0.0 && self.exclusion_rate < 1.0) {
            return Err(Error::invariant("exclusion_rate", "must lie in [0, 1)"));
        }
        if !(self.density_beta >= 0.0) || !(self.density_sigma_fraction > 0.0) {
            return Err(Error::invariant("density_beta", "density parameters must be non-negative"));
        }
        Ok(())
    }
}

/// Relative keep-weight of each line, `1 + beta * exp(-(y - Y/2)^2 / (2 sigma^2))`.
pub fn line_density(n_pe: usize, beta: f64, sigma_fraction: f64) -> Vec<f64> {
    let sigma = sigma_fraction * n_pe as f64;
    let c = (n_pe / 2) as f64;
    (0..n_pe)
        .map(|y| 1.0 + beta * (-(y as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// Number of lines every bootstrap mask keeps before keep-center.
pub fn kept_lines(n_pe: usize, exclusion_rate: f64) -> usize {
    ((1.0 - exclusion_rate) * n_pe as f64).round() as usize
}

/// Draws `(before keep-center, applied)` mask pairs.
pub fn bootstrap_masks(n_pe: usize, config: &OrbaConfig) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    config.validate()?;
    let density = line_density(n_pe, config.density_beta, config.density_sigma_fraction);
    let keep = kept_lines(n_pe, config.exclusion_rate).min(n_pe);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Vec::with_capacity(config.n_masks);
    for _ in 0..config.n_masks {
        let picked = rand::seq::index::sample_weighted(&mut rng, n_pe, |i| density[i], keep)
            .map_err(|e| Error::InvalidArgument(format!("mask sampling failed: {e}")))?;
        let mut raw = vec![0.0; n_pe];
        for i in picked.iter() {
            raw[i] = 1.0;
        }
        let mut applied = raw.clone();
        if config.keep_center {
            keep_center_weights(&mut applied)?;
        }
        out.push((raw, applied));
    }
    Ok(out)
}

/// Mean of the complex CG reconstructions over the bootstrap masks. Each
/// mask is shared by all slices. Returns the image and the applied masks.
pub fn orba_reconstruct(
    kspace: &KSpaceData,
    coils: &CoilSensitivities,
    config: &OrbaConfig,
    cg: &CgOptions,
) -> Result<(ImageStack, Vec<Vec<f64>>)> {
    let masks: Vec<Vec<f64>> = bootstrap_masks(kspace.dims().pe, config)?.into_iter().map(|(_, m)| m).collect();
    let mut sum: Option<Vec<C64>> = None;
    let mut template = None;
    for m in &masks {
        let (img, _) = reconstruct_volume(kspace, &m[..], coils, cg)?;
        match &mut sum {
            None => sum = Some(img.values().to_vec()),
            Some(acc) => acc.iter_mut().zip(img.values()).for_each(|(a, v)| *a += v),
        }
        template.get_or_insert(img);
    }
    let template = template.expect("at least one mask");
    let inv = 1.0 / masks.len() as f64;
    let values = sum.expect("at least one mask").into_iter().map(|v| v * inv).collect();
    let stack = ImageStack::new(template.dims(), values, template.echo_times_ms().to_vec(), template.voxel_size_mm())?;
    Ok((stack, masks))
}

/// Relative weights of the three acquisitions where they overlap.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HrqrWeights {
    pub full: f64,
    pub half: f64,
    pub quarter: f64,
}

impl Default for HrqrWeights {
    fn default() -> Self {
        HrqrWeights {
            full: 1.0,
            half: 1.0,
            quarter: 1.0,
        }
    }
}

/// Number of central lines of the half and quarter acquisitions for `n_pe`
/// full lines, rounded up to keep both even.
pub fn partial_line_counts(n_pe: usize) -> (usize, usize) {
    let even_up = |v: usize| v + v % 2;
    (even_up(n_pe / 2), even_up(n_pe.div_ceil(4)))
}

/// Offset of `count` central lines within `n_pe`.
pub fn central_offset(n_pe: usize, count: usize) -> usize {
    (n_pe - count) / 2
}

/// Keeps `count` central PE lines of every slice, echo and coil.
pub fn crop_central_lines(kspace: &KSpaceData, count: usize) -> Result<KSpaceData> {
    let d = kspace.dims();
    if count > d.pe || (d.pe - count) % 2 != 0 {
        return Err(Error::InvalidArgument(format!("cannot take {count} central lines of {}", d.pe)));
    }
    let off = central_offset(d.pe, count);
    let mut out = Vec::with_capacity(d.slices * d.echoes * d.coils * count * d.ro);
    for block in kspace.samples().chunks_exact(d.pe * d.ro) {
        out.extend_from_slice(&block[off * d.ro..(off + count) * d.ro]);
    }
    KSpaceData::new(
        KSpaceDims { pe: count, ..d },
        out,
        kspace.echo_times_ms().to_vec(),
        kspace.tr_ms(),
        kspace.voxel_size_mm(),
    )
}

/// Weighted average of the redundant central lines; the periphery is taken
/// from the full acquisition unchanged.
pub fn hrqr_combine(
    full: &KSpaceData,
    half: &KSpaceData,
    quarter: &KSpaceData,
    weights: &HrqrWeights,
) -> Result<KSpaceData> {
    let (fd, hd, qd) = (full.dims(), half.dims(), quarter.dims());
    let same = |d: KSpaceDims| d.slices == fd.slices && d.echoes == fd.echoes && d.coils == fd.coils && d.ro == fd.ro;
    if !same(hd) || !same(qd) {
        return Err(Error::Shape("half and quarter acquisitions must match the full one outside PE".into()));
    }
    if !(qd.pe <= hd.pe && hd.pe <= fd.pe) || (fd.pe - hd.pe) % 2 != 0 || (fd.pe - qd.pe) % 2 != 0 {
        return Err(Error::Shape(format!(
            "coverage mismatch: full {}, half {}, quarter {} lines",
            fd.pe, hd.pe, qd.pe
        )));
    }
    if full.echo_times_ms() != half.echo_times_ms() || full.echo_times_ms() != quarter.echo_times_ms() {
        return Err(Error::invariant("echo_times_ms", "acquisitions must share echo times"));
    }
    if [weights.full, weights.half, weights.quarter].iter().any(|w| !(*w > 0.0)) {
        return Err(Error::invariant("weights", "must be positive"));
    }
    let (h_off, q_off) = (central_offset(fd.pe, hd.pe), central_offset(fd.pe, qd.pe));
    let ro = fd.ro;
    let mut out = full.samples().to_vec();
    let blocks = fd.slices * fd.echoes * fd.coils;
    for b in 0..blocks {
        let dst = &mut out[b * fd.pe * ro..(b + 1) * fd.pe * ro];
        let hsrc = &half.samples()[b * hd.pe * ro..(b + 1) * hd.pe * ro];
        let qsrc = &quarter.samples()[b * qd.pe * ro..(b + 1) * qd.pe * ro];
        for y in h_off..h_off + hd.pe {
            let in_quarter = (q_off..q_off + qd.pe).contains(&y);
            let total = weights.full + weights.half + if in_quarter { weights.quarter } else { 0.0 };
            for x in 0..ro {
                let mut v = dst[y * ro + x] * weights.full + hsrc[(y - h_off) * ro + x] * weights.half;
                if in_quarter {
                    v += qsrc[(y - q_off) * ro + x] * weights.quarter;
                }
                dst[y * ro + x] = v / total;
            }
        }
    }
    KSpaceData::new(fd, out, full.echo_times_ms().to_vec(), full.tr_ms(), full.voxel_size_mm())
}
