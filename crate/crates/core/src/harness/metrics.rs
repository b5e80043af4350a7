use serde::{Deserialize, Serialize};

use super::HarnessError;

/// One sample of the tracking loop, taken every second.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackRow {
    pub t: f64,
    pub p_ref_kw: f64,
    /// Physical fleet demand.
    pub p_true_kw: f64,
    /// Coordinator timer reconstruction.
    pub p_est_kw: f64,
    /// Demand the coordinator actually used in its error.
    pub p_feedback_kw: f64,
}

/// SoC spread of one fleet group in deadband units (0 = x̲, 1 = x̄).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SocRow {
    pub t: f64,
    pub group: usize,
    pub mean: f64,
    pub p10: f64,
    pub p90: f64,
    pub outside: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstRow {
    pub t: f64,
    pub z_true: f64,
    pub z_hat: f64,
    pub tv: f64,
    pub nis: f64,
    pub innovation_kw: f64,
    pub beta_c: f64,
    pub beta_d: f64,
    pub demand_kw: f64,
    pub requests_charge: u64,
    pub requests_discharge: u64,
    pub accepted_charge: u64,
    pub accepted_discharge: u64,
    pub opt_outs: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub t: f64,
    pub df_int_hz: f64,
    pub df_ext_hz: f64,
    pub tie_mw: f64,
    pub ace_int_mw: f64,
    pub ace_ext_mw: f64,
    pub external_mw: f64,
    pub local1_mw: f64,
    pub local2_mw: f64,
    pub battery_mw: f64,
    pub battery_mwh: f64,
    pub der_cmd_mw: f64,
    pub der_actual_mw: f64,
    pub solar_mw: f64,
    pub z_hat: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Traces {
    pub tracking: Vec<TrackRow>,
    pub soc: Vec<SocRow>,
    pub estimator: Vec<EstRow>,
    pub grid: Vec<GridRow>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunMetrics {
    pub samples: usize,
    pub warmup_s: f64,
    pub baseline_kw: Option<f64>,
    /// RMS of P_ref − P_true after warmup.
    pub rms_kw: f64,
    pub rms_pct_baseline: Option<f64>,
    /// Same, over the whole run including warmup.
    pub rms_full_kw: f64,
    /// RMS of the timer reconstruction against the true demand.
    pub reconstruction_rms_kw: f64,
    pub reconstruction_bias_kw: f64,
    /// Share of samples where |reconstruction − true| ≤ the mean rated power.
    pub reconstruction_within_rated: f64,
    pub mean_rated_kw: f64,
    pub requests_charge: u64,
    pub requests_discharge: u64,
    pub accepted_charge: u64,
    pub accepted_discharge: u64,
    pub opt_outs: u64,
    pub soc_p10_min: Option<f64>,
    pub soc_p90_max: Option<f64>,
    pub qos_outside_max: Option<f64>,
    pub est_max_abs_z_err: Option<f64>,
    pub est_max_tv: Option<f64>,
    pub est_mean_nis: Option<f64>,
    pub grid_max_abs_df_hz: Option<f64>,
    pub grid_final_df_hz: Option<f64>,
    pub grid_final_tie_mw: Option<f64>,
    pub grid_mean_abs_ace_mw: Option<f64>,
}

impl RunMetrics {
    /// `(key, value)` pairs in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let f = |v: f64| format!("{v:.6}");
        let o = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
        vec![
            ("samples", self.samples.to_string()),
            ("warmup_s", f(self.warmup_s)),
            ("baseline_kw", o(self.baseline_kw)),
            ("rms_kw", f(self.rms_kw)),
            ("rms_pct_baseline", o(self.rms_pct_baseline)),
            ("rms_full_kw", f(self.rms_full_kw)),
            ("reconstruction_rms_kw", f(self.reconstruction_rms_kw)),
            ("reconstruction_bias_kw", f(self.reconstruction_bias_kw)),
            (
                "reconstruction_within_rated",
                f(self.reconstruction_within_rated),
            ),
            ("mean_rated_kw", f(self.mean_rated_kw)),
            ("requests_charge", self.requests_charge.to_string()),
            ("requests_discharge", self.requests_discharge.to_string()),
            ("accepted_charge", self.accepted_charge.to_string()),
            ("accepted_discharge", self.accepted_discharge.to_string()),
            ("opt_outs", self.opt_outs.to_string()),
            ("soc_p10_min", o(self.soc_p10_min)),
            ("soc_p90_max", o(self.soc_p90_max)),
            ("qos_outside_max", o(self.qos_outside_max)),
            ("est_max_abs_z_err", o(self.est_max_abs_z_err)),
            ("est_max_tv", o(self.est_max_tv)),
            ("est_mean_nis", o(self.est_mean_nis)),
            ("grid_max_abs_df_hz", o(self.grid_max_abs_df_hz)),
            ("grid_final_df_hz", o(self.grid_final_df_hz)),
            ("grid_final_tie_mw", o(self.grid_final_tie_mw)),
            ("grid_mean_abs_ace_mw", o(self.grid_mean_abs_ace_mw)),
        ]
    }
}

/// Root-mean-square difference of two aligned series.
pub fn rms(a: &[f64], b: &[f64]) -> Result<f64, HarnessError> {
    if a.len() != b.len() {
        return Err(HarnessError::Misaligned(a.len(), b.len()));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((s / a.len() as f64).sqrt())
}

/// Linear-interpolated percentile of an already sorted slice, `p` in [0, 100].
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let r = (p / 100.0).clamp(0.0, 1.0) * (n - 1) as f64;
            let i = r.floor() as usize;
            if i + 1 >= n {
                sorted[n - 1]
            } else {
                sorted[i] + (r - i as f64) * (sorted[i + 1] - sorted[i])
            }
        }
    }
}

pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    percentile_sorted(&v, p)
}

/// RMS of P_ref − P_true over rows with `from ≤ t < to`.
pub fn window_rms(rows: &[TrackRow], from: f64, to: f64) -> f64 {
    let w: Vec<&TrackRow> = rows.iter().filter(|r| r.t >= from && r.t < to).collect();
    if w.is_empty() {
        return 0.0;
    }
    (w.iter()
        .map(|r| (r.p_ref_kw - r.p_true_kw).powi(2))
        .sum::<f64>()
        / w.len() as f64)
        .sqrt()
}

fn max_of(it: impl Iterator<Item = f64>) -> Option<f64> {
    it.fold(None, |m, v| Some(m.map_or(v, |m: f64| m.max(v))))
}

fn min_of(it: impl Iterator<Item = f64>) -> Option<f64> {
    it.fold(None, |m, v| Some(m.map_or(v, |m: f64| m.min(v))))
}

/// Summarise traces. Windowed figures skip samples before `warmup_s`.
pub fn compute_metrics(
    traces: &Traces,
    warmup_s: f64,
    baseline_kw: Option<f64>,
    mean_rated_kw: f64,
) -> Result<RunMetrics, HarnessError> {
    let tr = &traces.tracking;
    let all_ref: Vec<f64> = tr.iter().map(|r| r.p_ref_kw).collect();
    let all_dem: Vec<f64> = tr.iter().map(|r| r.p_true_kw).collect();
    let post: Vec<&TrackRow> = tr.iter().filter(|r| r.t >= warmup_s).collect();
    let p_ref: Vec<f64> = post.iter().map(|r| r.p_ref_kw).collect();
    let p_dem: Vec<f64> = post.iter().map(|r| r.p_true_kw).collect();
    let p_est: Vec<f64> = post.iter().map(|r| r.p_est_kw).collect();
    let rms_kw = rms(&p_ref, &p_dem)?;
    let n = post.len().max(1) as f64;
    let within = post
        .iter()
        .filter(|r| (r.p_est_kw - r.p_true_kw).abs() <= mean_rated_kw + 1e-9)
        .count() as f64;
    let est_rows: Vec<&EstRow> = traces.estimator.iter().collect();
    let est_post: Vec<&&EstRow> = est_rows.iter().filter(|r| r.t >= warmup_s).collect();
    let grid_last = traces.grid.last();
    let soc_post: Vec<&SocRow> = traces.soc.iter().filter(|r| r.t >= warmup_s).collect();
    let has_est = est_post.iter().any(|r| r.z_hat.is_finite());
    Ok(RunMetrics {
        samples: tr.len(),
        warmup_s,
        baseline_kw,
        rms_kw,
        rms_pct_baseline: baseline_kw.filter(|b| *b > 0.0).map(|b| 100.0 * rms_kw / b),
        rms_full_kw: rms(&all_ref, &all_dem)?,
        reconstruction_rms_kw: rms(&p_est, &p_dem)?,
        reconstruction_bias_kw: post.iter().map(|r| r.p_est_kw - r.p_true_kw).sum::<f64>() / n,
        reconstruction_within_rated: if post.is_empty() { 1.0 } else { within / n },
        mean_rated_kw,
        requests_charge: est_rows.iter().map(|r| r.requests_charge).sum(),
        requests_discharge: est_rows.iter().map(|r| r.requests_discharge).sum(),
        accepted_charge: est_rows.iter().map(|r| r.accepted_charge).sum(),
        accepted_discharge: est_rows.iter().map(|r| r.accepted_discharge).sum(),
        opt_outs: est_rows.iter().map(|r| r.opt_outs).sum(),
        soc_p10_min: min_of(soc_post.iter().map(|r| r.p10)),
        soc_p90_max: max_of(soc_post.iter().map(|r| r.p90)),
        qos_outside_max: max_of(soc_post.iter().map(|r| r.outside)),
        est_max_abs_z_err: if has_est {
            max_of(est_post.iter().map(|r| (r.z_hat - r.z_true).abs()))
        } else {
            None
        },
        est_max_tv: if has_est {
            max_of(est_post.iter().map(|r| r.tv))
        } else {
            None
        },
        est_mean_nis: if has_est && !est_post.is_empty() {
            Some(est_post.iter().map(|r| r.nis).sum::<f64>() / est_post.len() as f64)
        } else {
            None
        },
        grid_max_abs_df_hz: max_of(
            traces
                .grid
                .iter()
                .map(|g| g.df_int_hz.abs().max(g.df_ext_hz.abs())),
        ),
        grid_final_df_hz: grid_last.map(|g| g.df_int_hz),
        grid_final_tie_mw: grid_last.map(|g| g.tie_mw),
        grid_mean_abs_ace_mw: if traces.grid.is_empty() {
            None
        } else {
            Some(
                traces.grid.iter().map(|g| g.ace_int_mw.abs()).sum::<f64>()
                    / traces.grid.len() as f64,
            )
        },
    })
}
