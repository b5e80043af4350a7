use std::path::Path;

use serde::Serialize;

use super::metrics::{RunMetrics, Traces, TrackRow};
use super::HarnessError;

fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<(), HarnessError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub const TRACKING_HEADER: &[&str] = &["t", "p_ref_kw", "p_true_kw", "p_est_kw", "p_feedback_kw"];
pub const SOC_HEADER: &[&str] = &["t", "group", "mean", "p10", "p90", "outside"];
pub const ESTIMATOR_HEADER: &[&str] = &[
    "t",
    "z_true",
    "z_hat",
    "tv",
    "nis",
    "innovation_kw",
    "beta_c",
    "beta_d",
    "demand_kw",
    "requests_charge",
    "requests_discharge",
    "accepted_charge",
    "accepted_discharge",
    "opt_outs",
];
pub const GRID_HEADER: &[&str] = &[
    "t",
    "df_int_hz",
    "df_ext_hz",
    "tie_mw",
    "ace_int_mw",
    "ace_ext_mw",
    "external_mw",
    "local1_mw",
    "local2_mw",
    "battery_mw",
    "battery_mwh",
    "der_cmd_mw",
    "der_actual_mw",
    "solar_mw",
    "z_hat",
];

/// Write every trace and the metrics table into `dir`.
pub fn write_outputs(
    dir: &Path,
    traces: &Traces,
    metrics: &RunMetrics,
) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    write_rows(&dir.join("tracking.csv"), TRACKING_HEADER, &traces.tracking)?;
    write_rows(&dir.join("soc.csv"), SOC_HEADER, &traces.soc)?;
    write_rows(
        &dir.join("estimator.csv"),
        ESTIMATOR_HEADER,
        &traces.estimator,
    )?;
    write_rows(&dir.join("grid.csv"), GRID_HEADER, &traces.grid)?;
    write_metrics(&dir.join("metrics.csv"), metrics)
}

pub fn write_metrics(path: &Path, m: &RunMetrics) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["metric", "value"])?;
    for (k, v) in m.entries() {
        w.write_record([k, v.as_str()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tracking(path: &Path) -> Result<Vec<TrackRow>, HarnessError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

/// Read back whichever traces exist in `dir`.
pub fn read_traces(dir: &Path) -> Result<Traces, HarnessError> {
    fn read<T: serde::de::DeserializeOwned>(p: &Path) -> Result<Vec<T>, HarnessError> {
        if !p.exists() {
            return Ok(Vec::new());
        }
        let mut r = csv::Reader::from_path(p)?;
        r.deserialize()
            .map(|x| x.map_err(HarnessError::from))
            .collect()
    }
    Ok(Traces {
        tracking: read(&dir.join("tracking.csv"))?,
        soc: read(&dir.join("soc.csv"))?,
        estimator: read(&dir.join("estimator.csv"))?,
        grid: read(&dir.join("grid.csv"))?,
    })
}
