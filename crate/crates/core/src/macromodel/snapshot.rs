//! Plain-text snapshot of a macromodel: one `key values...` line per field,
//! numbers written so they parse back bit-exactly.
//!
//! ```text
//! pemsim-macromodel 1
//! n_b 20
//! lower 48.9
//! upper 55.1
//! dt_s 60.0
//! ticks 60
//! drift_c <n_b values>
//! drift_sb <n_b values>
//! drift_d <n_b values>
//! g_c <n_b values>
//! g_d <n_b values>
//! charge_kw 4.5
//! discharge_kw 0.0
//! n_devices 2000.0
//! base_kw 0.0
//! top_cutoff 1
//! charge <n_b values>        (one line per packet age, youngest first)
//! standby <n_b values>
//! discharge <n_b values>     (one line per packet age, youngest first)
//! ```

use std::collections::{HashMap, VecDeque};
use std::fmt::Write as _;

use thiserror::Error;

use super::{BinGrid, Macromodel, TransitionData};

const MAGIC: &str = "pemsim-macromodel 1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SnapshotError {
    #[error("not a macromodel snapshot")]
    BadHeader,
    #[error("line {line}: {reason}")]
    Line { line: usize, reason: String },
    #[error("missing field `{0}`")]
    Missing(&'static str),
}

fn join(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x:?}"))
        .collect::<Vec<_>>()
        .join(" ")
}

impl Macromodel {
    pub fn to_snapshot(&self) -> String {
        let td = self.transition();
        let mut s = String::new();
        let _ = writeln!(s, "{MAGIC}");
        let _ = writeln!(s, "n_b {}", td.grid.n_b);
        let _ = writeln!(s, "lower {:?}", td.grid.lower);
        let _ = writeln!(s, "upper {:?}", td.grid.upper);
        let _ = writeln!(s, "dt_s {:?}", td.dt_s);
        let _ = writeln!(s, "ticks {}", td.ticks);
        for (k, v) in [
            ("drift_c", &td.drift_c),
            ("drift_sb", &td.drift_sb),
            ("drift_d", &td.drift_d),
            ("g_c", &td.g_c),
            ("g_d", &td.g_d),
        ] {
            let _ = writeln!(s, "{k} {}", join(v));
        }
        for (k, v) in [
            ("charge_kw", td.charge_kw),
            ("discharge_kw", td.discharge_kw),
            ("n_devices", td.n_devices),
            ("base_kw", td.base_kw),
        ] {
            let _ = writeln!(s, "{k} {v:?}");
        }
        let _ = writeln!(s, "top_cutoff {}", u8::from(td.top_cutoff));
        let (c, d) = self.cohorts();
        for cohort in c {
            let _ = writeln!(s, "charge {}", join(cohort));
        }
        let _ = writeln!(s, "standby {}", join(self.pmf().standby()));
        for cohort in d {
            let _ = writeln!(s, "discharge {}", join(cohort));
        }
        s
    }

    pub fn from_snapshot(text: &str) -> Result<Self, SnapshotError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == MAGIC => {}
            _ => return Err(SnapshotError::BadHeader),
        }
        let mut scalars: HashMap<&str, (usize, &str)> = HashMap::new();
        let mut vectors: HashMap<&str, Vec<f64>> = HashMap::new();
        let (mut charge, mut discharge) = (VecDeque::new(), VecDeque::new());
        for (i, line) in lines {
            let line_no = i + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            let parse_vec = || -> Result<Vec<f64>, SnapshotError> {
                rest.split_whitespace()
                    .map(|t| {
                        t.parse::<f64>().map_err(|e| SnapshotError::Line {
                            line: line_no,
                            reason: format!("`{key}`: {e}"),
                        })
                    })
                    .collect()
            };
            match key {
                "charge" => charge.push_back(parse_vec()?),
                "discharge" => discharge.push_back(parse_vec()?),
                "drift_c" | "drift_sb" | "drift_d" | "g_c" | "g_d" | "standby" => {
                    vectors.insert(key, parse_vec()?);
                }
                _ => {
                    scalars.insert(key, (line_no, rest.trim()));
                }
            }
        }
        fn num<T: std::str::FromStr>(
            m: &HashMap<&str, (usize, &str)>,
            k: &'static str,
        ) -> Result<T, SnapshotError>
        where
            T::Err: std::fmt::Display,
        {
            let (line, v) = m.get(k).ok_or(SnapshotError::Missing(k))?;
            v.parse().map_err(|e: T::Err| SnapshotError::Line {
                line: *line,
                reason: format!("`{k}`: {e}"),
            })
        }
        let mut vec_of = |k: &'static str| vectors.remove(k).ok_or(SnapshotError::Missing(k));
        let n_b: usize = num(&scalars, "n_b")?;
        let td = TransitionData {
            grid: BinGrid {
                n_b,
                lower: num(&scalars, "lower")?,
                upper: num(&scalars, "upper")?,
            },
            dt_s: num(&scalars, "dt_s")?,
            ticks: num(&scalars, "ticks")?,
            drift_c: vec_of("drift_c")?,
            drift_sb: vec_of("drift_sb")?,
            drift_d: vec_of("drift_d")?,
            g_c: vec_of("g_c")?,
            g_d: vec_of("g_d")?,
            charge_kw: num(&scalars, "charge_kw")?,
            discharge_kw: num(&scalars, "discharge_kw")?,
            n_devices: num(&scalars, "n_devices")?,
            base_kw: num(&scalars, "base_kw")?,
            top_cutoff: num::<u8>(&scalars, "top_cutoff")? != 0,
            packet_steps_c: charge.len(),
            packet_steps_d: discharge.len(),
        };
        let standby = vec_of("standby")?;
        if charge.is_empty() {
            return Err(SnapshotError::Missing("charge"));
        }
        if discharge.is_empty() {
            return Err(SnapshotError::Missing("discharge"));
        }
        let lens_ok = [
            &td.drift_c,
            &td.drift_sb,
            &td.drift_d,
            &td.g_c,
            &td.g_d,
            &standby,
        ]
        .into_iter()
        .chain(charge.iter())
        .chain(discharge.iter())
        .all(|v| v.len() == n_b);
        if !lens_ok {
            return Err(SnapshotError::Line {
                line: 0,
                reason: format!("every vector must have n_b = {n_b} entries"),
            });
        }
        Ok(Macromodel::from_parts(td, charge, standby, discharge))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::DeviceParams;
    use crate::macromodel::{build_transition, FleetPmf, MacroConfig};

    #[test]
    fn snapshot_round_trips() {
        let p = DeviceParams::ewh(4.5, 275.0, 52.0, 48.9, 55.1);
        let td = build_transition(&p, &MacroConfig::new(2000.0, 1.11)).unwrap();
        let mut m = Macromodel::new(td, &FleetPmf::uniform_standby(20));
        for _ in 0..7 {
            m.step(0.4, 0.0);
        }
        let text = m.to_snapshot();
        let back = Macromodel::from_snapshot(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_snapshot(), text);
    }

    #[test]
    fn bad_snapshots_are_rejected() {
        assert_eq!(
            Macromodel::from_snapshot("hello"),
            Err(SnapshotError::BadHeader)
        );
        let r = Macromodel::from_snapshot("pemsim-macromodel 1\nn_b x\n");
        assert!(matches!(
            r,
            Err(SnapshotError::Missing(_)) | Err(SnapshotError::Line { .. })
        ));
    }
}
