//! Solar output profiles from CSV (`timestamp,mw`, timestamp in seconds).

use std::io::Read;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolarError {
    #[error("cannot read solar profile: {0}")]
    Io(#[from] std::io::Error),
    #[error("row {row}: {reason}")]
    Row { row: usize, reason: String },
    #[error("solar profile needs at least two rows")]
    TooShort,
    #[error("resampling step must be positive, got {0}")]
    BadStep(f64),
}

#[derive(Debug, Deserialize)]
struct Record {
    timestamp: f64,
    mw: f64,
}

/// Solar output sampled on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SolarSeries {
    pub t0: f64,
    pub dt: f64,
    pub mw: Vec<f64>,
}

impl SolarSeries {
    /// Deviation from the first sample.
    pub fn deviation(&self) -> Vec<f64> {
        let base = self.mw.first().copied().unwrap_or(0.0);
        self.mw.iter().map(|x| x - base).collect()
    }

    /// Output at time `t`, linearly interpolated and held at the ends.
    pub fn at(&self, t: f64) -> f64 {
        if self.mw.is_empty() {
            return 0.0;
        }
        let s = ((t - self.t0) / self.dt).max(0.0);
        let i = s.floor() as usize;
        if i + 1 >= self.mw.len() {
            return *self.mw.last().unwrap();
        }
        let f = s - i as f64;
        self.mw[i] + f * (self.mw[i + 1] - self.mw[i])
    }

    /// Trapezoid energy in MWh.
    pub fn energy_mwh(&self) -> f64 {
        self.mw
            .windows(2)
            .map(|w| 0.5 * (w[0] + w[1]) * self.dt)
            .sum::<f64>()
            / 3600.0
    }
}

fn read_points<R: Read>(reader: R) -> Result<Vec<(f64, f64)>, SolarError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut pts: Vec<(f64, f64)> = Vec::new();
    for (i, rec) in rdr.deserialize::<Record>().enumerate() {
        // Row 1 is the header.
        let row = i + 2;
        let r = rec.map_err(|e| SolarError::Row {
            row,
            reason: e.to_string(),
        })?;
        if !r.timestamp.is_finite() || !r.mw.is_finite() {
            return Err(SolarError::Row {
                row,
                reason: "non-finite value".into(),
            });
        }
        if let Some(&(prev, _)) = pts.last() {
            if r.timestamp <= prev {
                return Err(SolarError::Row {
                    row,
                    reason: format!("timestamp {} does not increase", r.timestamp),
                });
            }
        }
        pts.push((r.timestamp, r.mw));
    }
    if pts.len() < 2 {
        return Err(SolarError::TooShort);
    }
    Ok(pts)
}

fn resample(pts: &[(f64, f64)], dt: f64) -> Result<SolarSeries, SolarError> {
    if !(dt > 0.0) {
        return Err(SolarError::BadStep(dt));
    }
    let (t0, t1) = (pts[0].0, pts[pts.len() - 1].0);
    let n = ((t1 - t0) / dt).ceil() as usize;
    let mut mw = Vec::with_capacity(n + 1);
    let mut j = 0;
    for k in 0..=n {
        let t = (t0 + k as f64 * dt).min(t1);
        while j + 2 < pts.len() && pts[j + 1].0 <= t {
            j += 1;
        }
        let (ta, a) = pts[j];
        let (tb, b) = pts[j + 1];
        let f = ((t - ta) / (tb - ta)).clamp(0.0, 1.0);
        mw.push(a + f * (b - a));
    }
    Ok(SolarSeries { t0, dt, mw })
}

pub fn ingest_solar_reader<R: Read>(reader: R, dt: f64) -> Result<SolarSeries, SolarError> {
    resample(&read_points(reader)?, dt)
}

pub fn ingest_solar_profile(path: &Path, dt: f64) -> Result<SolarSeries, SolarError> {
    ingest_solar_reader(std::fs::File::open(path)?, dt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_profile_has_no_deviation() {
        let s =
            ingest_solar_reader("timestamp,mw\n0,50\n300,50\n600,50\n".as_bytes(), 0.1).unwrap();
        assert!(s.deviation().iter().all(|&d| d == 0.0));
        assert_eq!(s.mw.len(), 6001);
    }

    #[test]
    fn endpoints_are_kept_and_energy_matches() {
        let csv = "timestamp,mw\n0,0\n300,40\n600,100\n900,20\n";
        let s = ingest_solar_reader(csv.as_bytes(), 0.1).unwrap();
        assert_eq!(s.mw[0], 0.0);
        assert!((s.mw.last().unwrap() - 20.0).abs() < 1e-9);
        let src =
            (0.5 * (0.0 + 40.0) + 0.5 * (40.0 + 100.0) + 0.5 * (100.0 + 20.0)) * 300.0 / 3600.0;
        assert!((s.energy_mwh() - src).abs() / src < 1e-3);
        assert!((s.at(150.0) - 20.0).abs() < 1e-9);
    }

    #[test]
    fn bad_rows_are_reported_with_row_numbers() {
        let e = ingest_solar_reader("timestamp,mw\n0,1\n10,x\n".as_bytes(), 1.0).unwrap_err();
        assert!(matches!(e, SolarError::Row { row: 3, .. }), "{e}");
        let e = ingest_solar_reader("timestamp,mw\n0,1\n10,2\n10,3\n".as_bytes(), 1.0).unwrap_err();
        assert!(matches!(e, SolarError::Row { row: 4, .. }), "{e}");
        let e = ingest_solar_reader("timestamp,mw\n0,1\n".as_bytes(), 1.0).unwrap_err();
        assert!(matches!(e, SolarError::TooShort));
    }
}
