use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

/// Binary 8-bit PGM of a row-major map, linearly windowed to `window`.
pub fn encode_pgm(values: &[f64], h: usize, w: usize, window: [f64; 2]) -> Result<Vec<u8>> {
    if values.len() != h * w {
        bail!("image has {} values, expected {h}x{w}", values.len());
    }
    let [lo, hi] = window;
    if !(hi > lo) {
        bail!("display window [{lo}, {hi}] is empty");
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| {
        let t = (v - lo) / (hi - lo);
        if t.is_nan() {
            0
        } else {
            (t.clamp(0.0, 1.0) * 255.0).round() as u8
        }
    }));
    Ok(out)
}

pub fn write_pgm(path: &Path, values: &[f64], h: usize, w: usize, window: [f64; 2]) -> Result<()> {
    fs::write(path, encode_pgm(values, h, w, window)?).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_maps_to_full_range() {
        let bytes = encode_pgm(&[-5.0, 0.0, 100.0, 200.0, 900.0, f64::NAN], 2, 3, [0.0, 200.0]).unwrap();
        let header = b"P5\n3 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0, 0, 128, 255, 255, 0]);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(encode_pgm(&[1.0; 5], 2, 3, [0.0, 1.0]).is_err());
        assert!(encode_pgm(&[1.0; 6], 2, 3, [1.0, 1.0]).is_err());
    }
}
