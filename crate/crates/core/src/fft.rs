//! Centered, orthonormal FFTs on row-major planes.
//!
//! Axis 0 is the phase-encode direction (rows, `y`), axis 1 readout (`x`).

use rustfft::{Fft, FftDirection, FftPlanner};
use std::sync::Arc;

use crate::model::C64;

/// Forward and inverse plans for one `h x w` plane.
#[derive(Clone)]
pub struct Fft2 {
    h: usize,
    w: usize,
    fwd_y: Arc<dyn Fft<f64>>,
    inv_y: Arc<dyn Fft<f64>>,
    fwd_x: Arc<dyn Fft<f64>>,
    inv_x: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    pub fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            h,
            w,
            fwd_y: planner.plan_fft(h, FftDirection::Forward),
            inv_y: planner.plan_fft(h, FftDirection::Inverse),
            fwd_x: planner.plan_fft(w, FftDirection::Forward),
            inv_x: planner.plan_fft(w, FftDirection::Inverse),
        }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    /// Transforms every row in place (along `x`).
    pub fn rows(&self, plane: &mut [C64], inverse: bool) {
        let plan = if inverse { &self.inv_x } else { &self.fwd_x };
        let scale = 1.0 / (self.w as f64).sqrt();
        let half = self.w / 2;
        for row in plane.chunks_exact_mut(self.w) {
            row.rotate_left(half);
            plan.process(row);
            row.rotate_right(half);
            row.iter_mut().for_each(|v| *v *= scale);
        }
    }

    /// Transforms every column in place (along `y`).
    pub fn cols(&self, plane: &mut [C64], inverse: bool) {
        let plan = if inverse { &self.inv_y } else { &self.fwd_y };
        let (h, w) = (self.h, self.w);
        let scale = 1.0 / (h as f64).sqrt();
        let half = h / 2;
        let mut t = vec![C64::new(0.0, 0.0); h * w];
        for y in 0..h {
            // fold the ifftshift into the transpose
            let dst_y = (y + h - half) % h;
            for x in 0..w {
                t[x * h + dst_y] = plane[y * w + x];
            }
        }
        plan.process(&mut t);
        for x in 0..w {
            let col = &t[x * h..(x + 1) * h];
            for k in 0..h {
                plane[((k + half) % h) * w + x] = col[k] * scale;
            }
        }
    }

    pub fn forward(&self, plane: &mut [C64]) {
        self.rows(plane, false);
        self.cols(plane, false);
    }

    pub fn inverse(&self, plane: &mut [C64]) {
        self.rows(plane, true);
        self.cols(plane, true);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    /// Direct centered DFT along one axis of length n.
    fn dft(v: &[C64], inverse: bool) -> Vec<C64> {
        let n = v.len() as f64;
        let c = (v.len() / 2) as f64;
        let sign = if inverse { 1.0 } else { -1.0 };
        (0..v.len())
            .map(|k| {
                v.iter().enumerate().fold(C64::new(0.0, 0.0), |acc, (j, x)| {
                    let phase = sign * 2.0 * PI * (k as f64 - c) * (j as f64 - c) / n;
                    acc + x * C64::from_polar(1.0, phase)
                }) / n.sqrt()
            })
            .collect()
    }

    fn plane(h: usize, w: usize) -> Vec<C64> {
        (0..h * w).map(|i| C64::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos())).collect()
    }

    #[test]
    fn matches_direct_dft() {
        for (h, w) in [(6, 5), (8, 8), (7, 4)] {
            let x = plane(h, w);
            let mut got = x.clone();
            Fft2::new(h, w).forward(&mut got);
            // rows then columns with the direct transform
            let mut want = x.clone();
            for r in want.chunks_exact_mut(w) {
                let t = dft(r, false);
                r.copy_from_slice(&t);
            }
            for c in 0..w {
                let col: Vec<C64> = (0..h).map(|y| want[y * w + c]).collect();
                for (y, v) in dft(&col, false).into_iter().enumerate() {
                    want[y * w + c] = v;
                }
            }
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn round_trip_and_energy() {
        let x = plane(8, 6);
        let mut y = x.clone();
        let f = Fft2::new(8, 6);
        f.forward(&mut y);
        let e0: f64 = x.iter().map(|v| v.norm_sqr()).sum();
        let e1: f64 = y.iter().map(|v| v.norm_sqr()).sum();
        assert!((e0 - e1).abs() < 1e-10);
        f.inverse(&mut y);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn centered_delta_is_flat() {
        let mut p = vec![C64::new(0.0, 0.0); 16];
        p[2 * 4 + 2] = C64::new(1.0, 0.0);
        Fft2::new(4, 4).forward(&mut p);
        for v in &p {
            assert!((v - C64::new(0.25, 0.0)).norm() < 1e-12);
        }
    }
}
