//! Aggregate state-bin (Markov) model of a homogeneous fleet.
//!
//! The SoC deadband is split into `n_b` bins and each bin has three copies,
//! one per mode (charge, standby, discharge), giving a PMF over `3·n_b`
//! states. Within-mode drift is upwind: a fraction of each bin equal to the
//! drift in bins per step moves to the neighbour. Packets last a whole
//! number of macro steps and expire through a cohort ledger in [`Macromodel`].

mod model;
mod snapshot;
mod solve;

pub use model::Macromodel;
pub use snapshot::SnapshotError;
pub use solve::{baseline_optimization, soc_limits, stationary_distribution, Baseline, SocLimits};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::{request_probability, DeviceClass, DeviceParams, Direction};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MacroError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("no stationary distribution after {iterations} steps (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("empty fleet")]
    EmptyFleet,
}

/// Uniform bins over the deadband.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinGrid {
    pub n_b: usize,
    pub lower: f64,
    pub upper: f64,
}

impl BinGrid {
    pub fn new(n_b: usize, lower: f64, upper: f64) -> Result<Self, MacroError> {
        if n_b == 0 || !(upper > lower) {
            return Err(MacroError::Config(format!(
                "bad bin grid: n_b={n_b}, [{lower}, {upper}]"
            )));
        }
        Ok(Self { n_b, lower, upper })
    }

    pub fn width(&self) -> f64 {
        (self.upper - self.lower) / self.n_b as f64
    }

    pub fn centers(&self) -> Vec<f64> {
        let w = self.width();
        (0..self.n_b)
            .map(|i| self.lower + w * (i as f64 + 0.5))
            .collect()
    }

    /// SoC of every state, charge copy first, then standby, then discharge.
    pub fn chi(&self) -> Vec<f64> {
        let c = self.centers();
        c.iter().chain(&c).chain(&c).copied().collect()
    }

    /// Bin holding `x`, with values outside the deadband clamped to the ends.
    pub fn bin_of(&self, x: f64) -> usize {
        let i = ((x - self.lower) / self.width()).floor();
        (i.max(0.0) as usize).min(self.n_b - 1)
    }

    pub fn dim(&self) -> usize {
        3 * self.n_b
    }
}

/// PMF over the `3·n_b` mode/bin states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetPmf {
    pub q: Vec<f64>,
}

impl FleetPmf {
    pub fn zeros(n_b: usize) -> Self {
        Self {
            q: vec![0.0; 3 * n_b],
        }
    }

    /// All mass in standby, spread evenly.
    pub fn uniform_standby(n_b: usize) -> Self {
        let mut p = Self::zeros(n_b);
        for v in &mut p.q[n_b..2 * n_b] {
            *v = 1.0 / n_b as f64;
        }
        p
    }

    pub fn n_b(&self) -> usize {
        self.q.len() / 3
    }

    pub fn charge(&self) -> &[f64] {
        &self.q[..self.n_b()]
    }

    pub fn standby(&self) -> &[f64] {
        let n = self.n_b();
        &self.q[n..2 * n]
    }

    pub fn discharge(&self) -> &[f64] {
        let n = self.n_b();
        &self.q[2 * n..]
    }

    pub fn total(&self) -> f64 {
        self.q.iter().sum()
    }

    /// Clip negatives and rescale to unit mass.
    pub fn normalize(&mut self) {
        for v in &mut self.q {
            if !(*v > 0.0) {
                *v = 0.0;
            }
        }
        let s = self.total();
        if s > 0.0 {
            for v in &mut self.q {
                *v /= s;
            }
        }
    }

    /// Mass per SoC bin summed over modes.
    pub fn marginal(&self) -> Vec<f64> {
        let n = self.n_b();
        (0..n)
            .map(|i| self.q[i] + self.q[n + i] + self.q[2 * n + i])
            .collect()
    }

    pub fn mean_soc(&self, grid: &BinGrid) -> f64 {
        self.q.iter().zip(grid.chi()).map(|(p, x)| p * x).sum()
    }

    /// Total-variation distance between the SoC marginals.
    pub fn tv_distance(&self, other: &FleetPmf) -> f64 {
        0.5 * self
            .marginal()
            .iter()
            .zip(other.marginal())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }

    /// Empirical PMF of a set of devices.
    pub fn from_samples(grid: &BinGrid, samples: impl IntoIterator<Item = (f64, Mode)>) -> Self {
        let mut p = Self::zeros(grid.n_b);
        let mut n = 0usize;
        for (x, m) in samples {
            p.q[m.offset(grid.n_b) + grid.bin_of(x)] += 1.0;
            n += 1;
        }
        if n > 0 {
            for v in &mut p.q {
                *v /= n as f64;
            }
        }
        p
    }
}

/// Mode copy of a macromodel state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Charge,
    Standby,
    Discharge,
}

impl Mode {
    fn offset(self, n_b: usize) -> usize {
        match self {
            Mode::Charge => 0,
            Mode::Standby => n_b,
            Mode::Discharge => 2 * n_b,
        }
    }
}

/// Control input for one macro step: accepted-request proportions and the
/// per-bin fraction of packet mass that expires this step.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlInput {
    pub beta_c: f64,
    pub beta_d: f64,
    pub expire_c: Vec<f64>,
    pub expire_d: Vec<f64>,
}

impl ControlInput {
    /// Acceptance proportions only; nothing expires.
    pub fn new(beta_c: f64, beta_d: f64, n_b: usize) -> Self {
        Self {
            beta_c,
            beta_d,
            expire_c: vec![0.0; n_b],
            expire_d: vec![0.0; n_b],
        }
    }

    /// The same expiry fraction in every bin.
    pub fn with_uniform_expiry(mut self, c: f64, d: f64) -> Self {
        self.expire_c.iter_mut().for_each(|v| *v = c);
        self.expire_d.iter_mut().for_each(|v| *v = d);
        self
    }

    pub fn is_valid(&self) -> bool {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        unit(self.beta_c)
            && unit(self.beta_d)
            && self.expire_c.iter().chain(&self.expire_d).all(|&v| unit(v))
    }
}

/// Everything needed to advance the macromodel of one homogeneous group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionData {
    pub grid: BinGrid,
    pub dt_s: f64,
    /// Device request ticks per macro step.
    pub ticks: u32,
    /// Signed drift in bins per step, per mode.
    pub drift_c: Vec<f64>,
    pub drift_sb: Vec<f64>,
    pub drift_d: Vec<f64>,
    /// Per-tick request probabilities at bin centres.
    pub g_c: Vec<f64>,
    pub g_d: Vec<f64>,
    pub charge_kw: f64,
    pub discharge_kw: f64,
    pub n_devices: f64,
    pub base_kw: f64,
    /// Charge mass crossing the top edge drops to standby (heater cut-off)
    /// instead of being forced to discharge.
    pub top_cutoff: bool,
    pub packet_steps_c: usize,
    pub packet_steps_d: usize,
}

/// Expected outputs of one macro step for the whole group.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MacroOutput {
    pub demand_kw: f64,
    pub requests_charge: f64,
    pub requests_discharge: f64,
    pub opt_outs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroConfig {
    pub n_b: usize,
    pub dt_s: f64,
    pub device_tick_s: f64,
    pub n_devices: f64,
    pub mean_draw_kw: f64,
    pub base_kw: f64,
}

impl MacroConfig {
    pub fn new(n_devices: f64, mean_draw_kw: f64) -> Self {
        Self {
            n_b: 20,
            dt_s: 60.0,
            device_tick_s: 1.0,
            n_devices,
            mean_draw_kw,
            base_kw: 0.0,
        }
    }
}

fn steps_for(len_s: f64, dt: f64) -> Result<usize, MacroError> {
    let k = len_s / dt;
    if (k - k.round()).abs() > 1e-9 || k.round() < 1.0 {
        return Err(MacroError::Config(format!(
            "packet length {len_s} s is not a whole number of {dt} s steps"
        )));
    }
    Ok(k.round() as usize)
}

/// Derive drift and request probabilities at bin centres from the device
/// model.
pub fn build_transition(
    params: &DeviceParams,
    cfg: &MacroConfig,
) -> Result<TransitionData, MacroError> {
    params
        .validate()
        .map_err(|e| MacroError::Config(e.to_string()))?;
    let grid = BinGrid::new(cfg.n_b, params.lower, params.upper)?;
    if !(cfg.dt_s > 0.0 && cfg.device_tick_s > 0.0) {
        return Err(MacroError::Config("step lengths must be positive".into()));
    }
    let ticks = cfg.dt_s / cfg.device_tick_s;
    if (ticks - ticks.round()).abs() > 1e-9 {
        return Err(MacroError::Config(
            "macro step must be a whole number of device ticks".into(),
        ));
    }
    let w = grid.width();
    let centers = grid.centers();
    let draw = params.draw_gain() * cfg.mean_draw_kw;
    let drift = |zeta: i8| -> Result<Vec<f64>, MacroError> {
        centers
            .iter()
            .map(|&x| {
                let a = (params.soc_rate(x, zeta) - draw) * cfg.dt_s / w;
                if a.abs() > 1.0 {
                    Err(MacroError::Config(format!(
                        "drift of {a:.3} bins per step at x={x:.3} exceeds one bin"
                    )))
                } else {
                    Ok(a)
                }
            })
            .collect()
    };
    let ess = params.class == DeviceClass::Ess;
    let tick = cfg.device_tick_s;
    Ok(TransitionData {
        grid,
        dt_s: cfg.dt_s,
        ticks: ticks.round() as u32,
        drift_c: drift(1)?,
        drift_sb: drift(0)?,
        drift_d: if ess { drift(-1)? } else { vec![0.0; cfg.n_b] },
        g_c: centers
            .iter()
            .map(|&x| request_probability(x, params, tick, Direction::Charge))
            .collect(),
        g_d: centers
            .iter()
            .map(|&x| request_probability(x, params, tick, Direction::Discharge))
            .collect(),
        charge_kw: params.charge_power_kw,
        discharge_kw: params.discharge_power_kw,
        n_devices: cfg.n_devices,
        base_kw: cfg.base_kw,
        top_cutoff: !ess,
        packet_steps_c: steps_for(params.charge_packet_s, cfg.dt_s)?,
        packet_steps_d: steps_for(params.discharge_packet_s, cfg.dt_s)?,
    })
}

/// Per-bin request terms over one macro step for a standby device:
/// (P[start charge], P[start discharge], E[charge requests], E[discharge requests]).
pub(crate) fn request_terms(td: &TransitionData, beta_c: f64, beta_d: f64, i: usize) -> [f64; 4] {
    let (gc, gd) = (td.g_c[i], td.g_d[i]);
    let rd_tick = (1.0 - gc) * gd;
    let x = beta_c * gc + beta_d * rd_tick;
    let n = td.ticks as f64;
    // Σ_{k<n} (1−x)^k
    let f = if x < 1e-15 {
        n
    } else {
        -(n * (-x).ln_1p()).exp_m1() / x
    };
    [beta_c * gc * f, beta_d * rd_tick * f, gc * f, rd_tick * f]
}

/// Upwind shift of `v` by signed fractional bins `a`; returns the mass that
/// left through the bottom and top edges.
pub(crate) fn drift(v: &mut [f64], a: &[f64]) -> (f64, f64) {
    let n = v.len();
    let mut out = vec![0.0; n];
    let (mut lo, mut hi) = (0.0, 0.0);
    for i in 0..n {
        let m = v[i] * a[i].abs();
        out[i] += v[i] - m;
        if a[i] > 0.0 {
            if i + 1 < n {
                out[i + 1] += m;
            } else {
                hi += m;
            }
        } else if i > 0 {
            out[i - 1] += m;
        } else {
            lo += m;
        }
    }
    v.copy_from_slice(&out);
    (lo, hi)
}

/// Demand of the group for a given PMF, kW.
pub fn demand_of(q: &FleetPmf, td: &TransitionData) -> f64 {
    let c: f64 = q.charge().iter().sum();
    let d: f64 = q.discharge().iter().sum();
    td.n_devices * (td.charge_kw * c - td.discharge_kw * d) + td.base_kw
}

/// Flows that leave a mode through a deadband edge in one step.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct EdgeFlows {
    /// Charge mass past the top edge.
    pub charge_top: f64,
    /// Standby mass past the bottom edge (forced charge).
    pub standby_low: f64,
    /// Standby mass past the top edge.
    pub standby_top: f64,
    /// Discharge mass past the bottom edge (forced charge).
    pub discharge_low: f64,
}

/// Drift all three copies and route edge crossings. Mass that must start a
/// forced packet is returned as (charge bin 0, discharge top bin) amounts so
/// the caller can place it in a fresh cohort.
pub(crate) fn drift_modes(
    td: &TransitionData,
    c: &mut [Vec<f64>],
    sb: &mut [f64],
    d: &mut [Vec<f64>],
) -> (EdgeFlows, f64, f64) {
    let n = td.grid.n_b;
    let mut fl = EdgeFlows::default();
    for cohort in c.iter_mut() {
        let (lo, hi) = drift(cohort, &td.drift_c);
        cohort[0] += lo;
        fl.charge_top += hi;
    }
    let (lo, hi) = drift(sb, &td.drift_sb);
    fl.standby_low = lo;
    fl.standby_top = hi;
    for cohort in d.iter_mut() {
        let (lo, hi) = drift(cohort, &td.drift_d);
        cohort[n - 1] += hi;
        fl.discharge_low += lo;
    }
    let forced_c = fl.standby_low + fl.discharge_low;
    let mut forced_d = 0.0;
    if td.top_cutoff {
        sb[n - 1] += fl.charge_top + fl.standby_top;
    } else {
        forced_d += fl.charge_top + fl.standby_top;
    }
    (fl, forced_c, forced_d)
}

impl EdgeFlows {
    pub fn opt_outs(&self, top_cutoff: bool) -> f64 {
        let top = self.charge_top + if top_cutoff { 0.0 } else { self.standby_top };
        self.standby_low + self.discharge_low + top
    }
}

/// One step of the aggregate dynamics q' = f(β, β⁻, q) and its outputs.
///
/// Order: expiring packet mass returns to standby, standby mass that is
/// granted a packet moves to the charge or discharge copy, then every copy
/// drifts. Request outputs count expected requests from the standby mass
/// present after expiry; demand is evaluated on q'.
pub fn step_pmf(q: &FleetPmf, u: &ControlInput, td: &TransitionData) -> (FleetPmf, MacroOutput) {
    let n = td.grid.n_b;
    debug_assert_eq!(q.q.len(), 3 * n);
    let mut c = vec![q.charge().to_vec()];
    let mut sb = q.standby().to_vec();
    let mut d = vec![q.discharge().to_vec()];
    for i in 0..n {
        let ec = u.expire_c[i] * c[0][i];
        let ed = u.expire_d[i] * d[0][i];
        c[0][i] -= ec;
        d[0][i] -= ed;
        sb[i] += ec + ed;
    }
    let mut out = MacroOutput::default();
    for i in 0..n {
        let [pc, pd, rc, rd] = request_terms(td, u.beta_c, u.beta_d, i);
        out.requests_charge += rc * sb[i];
        out.requests_discharge += rd * sb[i];
        let mc = pc * sb[i];
        let md = pd * sb[i];
        sb[i] -= mc + md;
        c[0][i] += mc;
        d[0][i] += md;
    }
    let (fl, forced_c, forced_d) = drift_modes(td, &mut c, &mut sb, &mut d);
    c[0][0] += forced_c;
    d[0][n - 1] += forced_d;
    let mut next = FleetPmf::zeros(n);
    next.q[..n].copy_from_slice(&c[0]);
    next.q[n..2 * n].copy_from_slice(&sb);
    next.q[2 * n..].copy_from_slice(&d[0]);
    out.requests_charge *= td.n_devices;
    out.requests_discharge *= td.n_devices;
    out.opt_outs = fl.opt_outs(td.top_cutoff) * td.n_devices;
    out.demand_kw = demand_of(&next, td);
    (next, out)
}

/// Fleet SoC z = (mean(x) − x̲)/(x̄ − x̲) from device samples.
pub fn fleet_soc(xs: &[f64], lower: f64, upper: f64) -> Result<f64, MacroError> {
    if xs.is_empty() {
        return Err(MacroError::EmptyFleet);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    Ok((mean - lower) / (upper - lower))
}

/// Fleet SoC from a PMF, z = (qᵀχ − x̲)/(x̄ − x̲).
pub fn fleet_soc_pmf(q: &FleetPmf, grid: &BinGrid) -> f64 {
    (q.mean_soc(grid) - grid.lower) / (grid.upper - grid.lower)
}
