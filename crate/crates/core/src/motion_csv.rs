use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{MotionCurve, RigidPose};

pub const MOTION_COLUMNS: [&str; 7] = ["t_s", "tx_mm", "ty_mm", "tz_mm", "rx_deg", "ry_deg", "rz_deg"];

/// Parses a motion curve from CSV text with the columns in [`MOTION_COLUMNS`].
/// Column order is free; extra columns are ignored.
pub fn parse_motion_csv(reader: impl std::io::Read) -> Result<MotionCurve> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::Csv(e.to_string()))?.clone();
    let mut index = [0usize; 7];
    for (slot, name) in index.iter_mut().zip(MOTION_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Csv(format!("missing column {name:?}")))?;
    }

    let mut t_s = Vec::new();
    let mut poses = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Csv(e.to_string()))?;
        let mut values = [0.0; 7];
        for (v, &col) in values.iter_mut().zip(&index) {
            let field = record.get(col).unwrap_or("");
            *v = field
                .parse()
                .map_err(|_| Error::Csv(format!("row {}: cannot parse {field:?}", row + 1)))?;
        }
        t_s.push(values[0]);
        poses.push(RigidPose::from_array([values[1], values[2], values[3], values[4], values[5], values[6]]));
    }
    if t_s.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Csv("t_s must be strictly increasing".into()));
    }
    MotionCurve::new(t_s, poses)
}

pub fn read_motion_csv(path: impl AsRef<Path>) -> Result<MotionCurve> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_motion_csv(file)
}

pub fn write_motion_csv(curve: &MotionCurve, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv(e.to_string()))?;
    w.write_record(MOTION_COLUMNS).map_err(|e| Error::Csv(e.to_string()))?;
    for (t, p) in curve.t_s().iter().zip(curve.poses()) {
        let mut row = vec![t.to_string()];
        row.extend(p.to_array().iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(|e| Error::Csv(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "t_s,tx_mm,ty_mm,tz_mm,rx_deg,ry_deg,rz_deg\n";

    #[test]
    fn single_zero_row_is_identity() {
        let curve = parse_motion_csv(format!("{HEADER}0,0,0,0,0,0,0\n").as_bytes()).unwrap();
        assert_eq!(curve.len(), 1);
        assert!(curve.poses()[0].is_identity());
    }

    #[test]
    fn repeated_time_is_rejected() {
        let text = format!("{HEADER}0,0,0,0,0,0,0\n1,0,0,0,0,0,0\n1,0,0,0,0,0,0\n");
        assert!(parse_motion_csv(text.as_bytes()).is_err());
    }

    #[test]
    fn counts_rows() {
        let mut text = HEADER.to_string();
        for i in 0..17 {
            text.push_str(&format!("{i},{},0,0,0,0,0.5\n", i as f64 * 0.1));
        }
        let curve = parse_motion_csv(text.as_bytes()).unwrap();
        assert_eq!(curve.len(), 17);
        assert!((curve.poses()[16].tx_mm - 1.6).abs() < 1e-12);
    }

    #[test]
    fn missing_column_is_named() {
        let err = parse_motion_csv("t_s,tx_mm\n0,0\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("ty_mm"), "{err}");
    }
}
