//! Acquisition timing of an interleaved two-package multi-slice sequence.
//!
//! Even-indexed slices form the first package and odd-indexed slices the
//! second. Within one TR every slice of the active package acquires the same
//! PE line, staggered by `tr / slices_in_package`. The even package acquires
//! all of its PE lines before the odd package starts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Package {
    Even,
    Odd,
}

impl Package {
    pub fn of_slice(slice: usize) -> Package {
        if slice % 2 == 0 {
            Package::Even
        } else {
            Package::Odd
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AcquisitionSchedule {
    n_slices: usize,
    n_pe: usize,
    tr_ms: f64,
    pe_order: Vec<usize>,
    /// `times[slice * n_pe + pe]`, seconds.
    times: Vec<f64>,
}

impl AcquisitionSchedule {
    pub fn n_slices(&self) -> usize {
        self.n_slices
    }

    pub fn n_pe(&self) -> usize {
        self.n_pe
    }

    pub fn tr_ms(&self) -> f64 {
        self.tr_ms
    }

    pub fn pe_order(&self) -> &[usize] {
        &self.pe_order
    }

    pub fn time_s(&self, slice: usize, pe: usize) -> f64 {
        self.times[slice * self.n_pe + pe]
    }

    pub fn package(&self, slice: usize) -> Package {
        Package::of_slice(slice)
    }

    /// Time at which the last line ends (start of the final line plus one TR).
    pub fn duration_s(&self) -> f64 {
        self.times.iter().cloned().fold(0.0, f64::max) + self.tr_ms / 1000.0
    }
}

/// The identity PE order `0, 1, …, n_pe - 1`.
pub fn sequential_order(n_pe: usize) -> Vec<usize> {
    (0..n_pe).collect()
}

pub fn build_schedule(
    n_slices: usize,
    n_pe: usize,
    tr_ms: f64,
    pe_order: &[usize],
) -> Result<AcquisitionSchedule> {
    if n_slices == 0 || n_pe == 0 {
        return Err(Error::InvalidArgument(format!(
            "schedule needs at least one slice and one PE line, got S={n_slices}, Y={n_pe}"
        )));
    }
    if !tr_ms.is_finite() || tr_ms <= 0.0 {
        return Err(Error::invariant("tr_ms", "repetition time must be finite and > 0"));
    }
    let mut seen = vec![false; n_pe];
    if pe_order.len() != n_pe || pe_order.iter().any(|&p| p >= n_pe || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::invariant("pe_order", format!("must be a permutation of 0..{n_pe}")));
    }
    let mut rank = vec![0usize; n_pe];
    for (r, &pe) in pe_order.iter().enumerate() {
        rank[pe] = r;
    }

    let tr_s = tr_ms / 1000.0;
    let n_even = n_slices.div_ceil(2);
    let n_odd = n_slices / 2;
    let odd_start = if n_even > 0 { n_pe as f64 * tr_s } else { 0.0 };

    let mut times = vec![0.0; n_slices * n_pe];
    for slice in 0..n_slices {
        let (in_package, position, start) = match Package::of_slice(slice) {
            Package::Even => (n_even, slice / 2, 0.0),
            Package::Odd => (n_odd, slice / 2, odd_start),
        };
        let offset = position as f64 * (tr_s / in_package as f64);
        for pe in 0..n_pe {
            times[slice * n_pe + pe] = start + rank[pe] as f64 * tr_s + offset;
        }
    }

    Ok(AcquisitionSchedule {
        n_slices,
        n_pe,
        tr_ms,
        pe_order: pe_order.to_vec(),
        times,
    })
}
