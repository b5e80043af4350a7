//! Reduced two-area frequency model with governor droop, tie-line flow and
//! ACE-driven integral AGC. Area 0 is the internal area (local generators,
//! bulk battery, DER fleet, solar); area 1 is the external interconnection.
//!
//! Power in MW, frequency deviations in Hz, time in s.

mod solar;

pub use solar::{ingest_solar_profile, ingest_solar_reader, SolarError, SolarSeries};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("grid step {0} s exceeds the 0.1 s stability bound")]
    StepTooLarge(f64),
    #[error("integrator produced a non-finite state at t={0}")]
    NonFinite(f64),
    #[error("invalid grid parameters: {0}")]
    Invalid(String),
}

/// A conventional generator with governor droop and AGC participation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub name: String,
    pub area: usize,
    pub capacity_mw: f64,
    pub scheduled_mw: f64,
    /// Inverse per-unit droop on machine base (33 ≈ 3% droop).
    pub droop_gain_pu: f64,
    pub agc_gain: f64,
}

impl Generator {
    /// Droop response in MW/Hz.
    pub fn droop_mw_per_hz(&self, f0: f64) -> f64 {
        self.droop_gain_pu * self.capacity_mw / f0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryParams {
    pub energy_mwh: f64,
    pub power_mw: f64,
    pub initial_soc: f64,
    pub agc_gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerParams {
    /// Nominal fleet demand, MW.
    pub nominal_mw: f64,
    /// Largest possible fleet demand, MW; base for the droop gain.
    pub capacity_mw: f64,
    pub droop_gain_pu: f64,
    pub agc_gain: f64,
    /// Fleet SoC limits the AGC weight ramps against.
    pub z_lower: f64,
    pub z_upper: f64,
    /// Fraction of the SoC range over which the AGC weight ramps to zero.
    pub ramp_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridParams {
    pub base_mva: f64,
    pub f0_hz: f64,
    /// Inertia constant M in s on the system base, per area.
    pub inertia_s: [f64; 2],
    /// Load damping in pu on the system base, per area.
    pub damping_pu: [f64; 2],
    /// Synchronising coefficient in pu on the system base.
    pub tie_pu: f64,
    pub governor_lag_s: f64,
    /// Bias factor multiplying each area's frequency response.
    pub bias_factor: [f64; 2],
    /// Scale on every AGC integral gain, 1/s.
    pub agc_scale: f64,
    pub generators: Vec<Generator>,
    pub battery: Option<BatteryParams>,
    pub der: Option<DerParams>,
}

impl GridParams {
    /// Two-area reduction of the Vermont system with its scheduled outputs.
    pub fn vermont() -> Self {
        let gen = |name: &str, area, cap, sched| Generator {
            name: name.into(),
            area,
            capacity_mw: cap,
            scheduled_mw: sched,
            droop_gain_pu: 33.0,
            agc_gain: 1.0,
        };
        Self {
            base_mva: 609.0,
            f0_hz: 60.0,
            inertia_s: [10.0, 10.0],
            damping_pu: [1.0, 1.0],
            tie_pu: 0.1,
            governor_lag_s: 0.5,
            bias_factor: [1.0, 1.0],
            agc_scale: 0.02,
            generators: vec![
                gen("external", 1, 240.0, 218.0),
                gen("local1", 0, 130.0, 86.2),
                gen("local2", 0, 35.0, 26.6),
            ],
            battery: Some(BatteryParams {
                energy_mwh: 45.0,
                power_mw: 15.0,
                initial_soc: 0.5,
                agc_gain: 1.0,
            }),
            der: Some(DerParams {
                nominal_mw: 4.68,
                capacity_mw: 18.0,
                droop_gain_pu: 20.0,
                agc_gain: 5.1,
                z_lower: 0.08,
                z_upper: 0.75,
                ramp_fraction: 0.2,
            }),
        }
    }

    pub fn validate(&self) -> Result<(), GridError> {
        let bad = |m: String| Err(GridError::Invalid(m));
        for a in 0..2 {
            if !(self.inertia_s[a] > 0.0 && self.damping_pu[a] > 0.0) {
                return bad(format!("area {a}: inertia and damping must be positive"));
            }
        }
        if !(self.governor_lag_s > 0.0 && self.base_mva > 0.0 && self.f0_hz > 0.0) {
            return bad("lag, base and nominal frequency must be positive".into());
        }
        for g in &self.generators {
            if g.area > 1 || !(g.droop_gain_pu > 0.0) || !(g.capacity_mw >= g.scheduled_mw) {
                return bad(format!("generator {}: bad area, droop or capacity", g.name));
            }
        }
        if let Some(d) = &self.der {
            if !(d.z_upper > d.z_lower) || !(d.ramp_fraction > 0.0 && d.ramp_fraction <= 0.5) {
                return bad("DER SoC limits or ramp fraction invalid".into());
            }
        }
        Ok(())
    }

    /// M in MW·s/Hz.
    pub fn inertia(&self, area: usize) -> f64 {
        self.inertia_s[area] * self.base_mva / self.f0_hz
    }

    /// D in MW/Hz.
    pub fn damping(&self, area: usize) -> f64 {
        self.damping_pu[area] * self.base_mva / self.f0_hz
    }

    /// Synchronising coefficient in MW/(Hz·s).
    pub fn tie_coefficient(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.tie_pu * self.base_mva
    }

    pub fn der_droop(&self) -> f64 {
        self.der
            .as_ref()
            .map_or(0.0, |d| d.droop_gain_pu * d.capacity_mw / self.f0_hz)
    }

    /// Area frequency response β = D + Σ droop, MW/Hz.
    pub fn frequency_response(&self, area: usize) -> f64 {
        let gens: f64 = self
            .generators
            .iter()
            .filter(|g| g.area == area)
            .map(|g| g.droop_mw_per_hz(self.f0_hz))
            .sum();
        let der = if area == 0 { self.der_droop() } else { 0.0 };
        self.damping(area) + gens + der
    }

    /// Frequency bias B in MW/Hz.
    pub fn bias(&self, area: usize) -> f64 {
        self.bias_factor[area] * self.frequency_response(area)
    }
}

/// SoC-aware AGC weight for the DER fleet. `direction` is the sign of the
/// fleet's demand deviation being asked for (+ more load, − less).
pub fn der_weight(z_hat: f64, direction: f64, d: &DerParams) -> f64 {
    let band = d.ramp_fraction * (d.z_upper - d.z_lower);
    let room = if direction > 0.0 {
        d.z_upper - z_hat
    } else if direction < 0.0 {
        z_hat - d.z_lower
    } else {
        return 1.0;
    };
    (room / band).clamp(0.0, 1.0)
}

/// ACE = B·Δf + ΔP_tie, positive for over-generation.
pub fn compute_ace(df_hz: f64, tie_export_mw: f64, bias_mw_per_hz: f64) -> f64 {
    bias_mw_per_hz * df_hz + tie_export_mw
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridState {
    pub t: f64,
    pub df: [f64; 2],
    /// Tie flow deviation, internal → external, MW.
    pub tie_mw: f64,
    /// Mechanical output deviation per generator, MW.
    pub mech_mw: Vec<f64>,
    /// AGC setpoint deviation per generator, MW.
    pub agc_mw: Vec<f64>,
    pub battery_mw: f64,
    pub battery_mwh: f64,
    /// Battery AGC setpoint before limits, MW.
    pub battery_cmd_mw: f64,
    /// DER AGC integrator (demand deviation before weighting), MW.
    pub der_integral_mw: f64,
    /// Demand deviation requested from the fleet, MW.
    pub der_cmd_mw: f64,
}

/// Exogenous inputs held over one grid step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GridInputs {
    pub solar_mw: f64,
    pub load_internal_mw: f64,
    pub load_external_mw: f64,
    /// Measured fleet demand deviation, MW. `None` treats the fleet as
    /// following its command exactly.
    pub der_actual_mw: Option<f64>,
    /// Estimated fleet SoC for the AGC weight.
    pub z_hat: f64,
}

impl GridState {
    pub fn new(p: &GridParams) -> Self {
        let n = p.generators.len();
        Self {
            t: 0.0,
            df: [0.0; 2],
            tie_mw: 0.0,
            mech_mw: vec![0.0; n],
            agc_mw: vec![0.0; n],
            battery_mw: 0.0,
            battery_mwh: p
                .battery
                .as_ref()
                .map_or(0.0, |b| b.energy_mwh * b.initial_soc),
            battery_cmd_mw: 0.0,
            der_integral_mw: 0.0,
            der_cmd_mw: 0.0,
        }
    }

    pub fn ace(&self, p: &GridParams, area: usize) -> f64 {
        let tie = if area == 0 { self.tie_mw } else { -self.tie_mw };
        compute_ace(self.df[area], tie, p.bias(area))
    }

    /// Generator output deviation by name.
    pub fn generator_mw(&self, p: &GridParams, name: &str) -> Option<f64> {
        p.generators
            .iter()
            .position(|g| g.name == name)
            .map(|i| self.mech_mw[i])
    }
}

// Continuous states: df0, df1, tie, mech[n], agc[n], battery_cmd, der_integral.
fn pack(s: &GridState) -> Vec<f64> {
    let mut v = vec![s.df[0], s.df[1], s.tie_mw];
    v.extend(&s.mech_mw);
    v.extend(&s.agc_mw);
    v.push(s.battery_cmd_mw);
    v.push(s.der_integral_mw);
    v
}

fn unpack(v: &[f64], s: &mut GridState) {
    let n = s.mech_mw.len();
    s.df = [v[0], v[1]];
    s.tie_mw = v[2];
    s.mech_mw.copy_from_slice(&v[3..3 + n]);
    s.agc_mw.copy_from_slice(&v[3 + n..3 + 2 * n]);
    s.battery_cmd_mw = v[3 + 2 * n];
    s.der_integral_mw = v[4 + 2 * n];
}

struct Algebraic {
    battery_mw: f64,
    der_cmd_mw: f64,
}

fn battery_output(p: &GridParams, cmd: f64, energy_mwh: f64) -> f64 {
    match &p.battery {
        None => 0.0,
        Some(b) => {
            let mut out = cmd.clamp(-b.power_mw, b.power_mw);
            if energy_mwh <= 0.0 && out > 0.0 {
                out = 0.0;
            }
            if energy_mwh >= b.energy_mwh && out < 0.0 {
                out = 0.0;
            }
            out
        }
    }
}

fn algebraic(p: &GridParams, v: &[f64], s: &GridState, inp: &GridInputs) -> Algebraic {
    let n = s.mech_mw.len();
    let battery_mw = battery_output(p, v[3 + 2 * n], s.battery_mwh);
    let integral = v[4 + 2 * n];
    let der_cmd_mw = match &p.der {
        None => 0.0,
        Some(d) => {
            let w = der_weight(inp.z_hat, integral, d);
            let lo = -d.nominal_mw;
            let hi = d.capacity_mw - d.nominal_mw;
            (w * integral + p.der_droop() * v[0]).clamp(lo, hi)
        }
    };
    Algebraic {
        battery_mw,
        der_cmd_mw,
    }
}

/// Time derivative of the continuous states.
fn derivative(p: &GridParams, v: &[f64], s: &GridState, inp: &GridInputs) -> Vec<f64> {
    let n = s.mech_mw.len();
    let alg = algebraic(p, v, s, inp);
    let der_mw = inp.der_actual_mw.unwrap_or(alg.der_cmd_mw);
    let df = [v[0], v[1]];
    let tie = v[2];
    let mut gen = [0.0; 2];
    for (i, g) in p.generators.iter().enumerate() {
        gen[g.area] += v[3 + i];
    }
    let ace = [
        compute_ace(df[0], tie, p.bias(0)),
        compute_ace(df[1], -tie, p.bias(1)),
    ];
    let mut dv = vec![0.0; v.len()];
    let inj0 = gen[0] + alg.battery_mw + inp.solar_mw - der_mw - inp.load_internal_mw;
    let inj1 = gen[1] - inp.load_external_mw;
    dv[0] = (inj0 - p.damping(0) * df[0] - tie) / p.inertia(0);
    dv[1] = (inj1 - p.damping(1) * df[1] + tie) / p.inertia(1);
    dv[2] = p.tie_coefficient() * (df[0] - df[1]);
    for (i, g) in p.generators.iter().enumerate() {
        let (lo, hi) = (-g.scheduled_mw, g.capacity_mw - g.scheduled_mw);
        let agc = v[3 + n + i];
        let target = (agc - g.droop_mw_per_hz(p.f0_hz) * df[g.area]).clamp(lo, hi);
        dv[3 + i] = (target - v[3 + i]) / p.governor_lag_s;
        // Integrate with anti-windup at the capacity limits.
        let rate = -p.agc_scale * g.agc_gain * ace[g.area];
        dv[3 + n + i] = if (agc >= hi && rate > 0.0) || (agc <= lo && rate < 0.0) {
            0.0
        } else {
            rate
        };
    }
    if let Some(b) = &p.battery {
        let cmd = v[3 + 2 * n];
        let rate = -p.agc_scale * b.agc_gain * ace[0];
        let stuck = (cmd >= b.power_mw && rate > 0.0) || (cmd <= -b.power_mw && rate < 0.0);
        dv[3 + 2 * n] = if stuck { 0.0 } else { rate };
    }
    if let Some(d) = &p.der {
        // Over-generation (ACE > 0) asks the fleet for more load.
        let integral = v[4 + 2 * n];
        let dir = if integral != 0.0 { integral } else { ace[0] };
        let w = der_weight(inp.z_hat, dir, d);
        let rate = p.agc_scale * d.agc_gain * w * ace[0];
        let (lo, hi) = (-d.nominal_mw, d.capacity_mw - d.nominal_mw);
        let stuck = (integral >= hi && rate > 0.0) || (integral <= lo && rate < 0.0);
        dv[4 + 2 * n] = if stuck { 0.0 } else { rate };
    }
    dv
}

/// Advance the grid by `dt` with classic fourth-order Runge–Kutta.
pub fn step_grid(
    state: &mut GridState,
    p: &GridParams,
    inp: &GridInputs,
    dt: f64,
) -> Result<(), GridError> {
    if !(dt > 0.0) || dt > 0.1 + 1e-12 {
        return Err(GridError::StepTooLarge(dt));
    }
    let v0 = pack(state);
    let k1 = derivative(p, &v0, state, inp);
    let add =
        |a: &[f64], k: &[f64], h: f64| a.iter().zip(k).map(|(x, d)| x + h * d).collect::<Vec<_>>();
    let k2 = derivative(p, &add(&v0, &k1, dt / 2.0), state, inp);
    let k3 = derivative(p, &add(&v0, &k2, dt / 2.0), state, inp);
    let k4 = derivative(p, &add(&v0, &k3, dt), state, inp);
    let v1: Vec<f64> = (0..v0.len())
        .map(|i| v0[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect();
    if v1.iter().any(|x| !x.is_finite()) {
        return Err(GridError::NonFinite(state.t));
    }
    let old_batt = state.battery_mw;
    unpack(&v1, state);
    let alg = algebraic(p, &v1, state, inp);
    state.battery_mw = alg.battery_mw;
    state.der_cmd_mw = alg.der_cmd_mw;
    if let Some(b) = &p.battery {
        // Trapezoidal energy bookkeeping, discharge positive.
        let e = state.battery_mwh - dt / 3600.0 * 0.5 * (old_batt + state.battery_mw);
        state.battery_mwh = e.clamp(0.0, b.energy_mwh);
    }
    state.t += dt;
    Ok(())
}

/// M·dΔf/dt − (injections − D·Δf ∓ tie) for each area at the current
/// state; zero up to rounding.
pub fn balance_residual(state: &GridState, p: &GridParams, inp: &GridInputs) -> [f64; 2] {
    let v = pack(state);
    let d = derivative(p, &v, state, inp);
    let alg = algebraic(p, &v, state, inp);
    let der_mw = inp.der_actual_mw.unwrap_or(alg.der_cmd_mw);
    let mut gen = [0.0; 2];
    for (i, g) in p.generators.iter().enumerate() {
        gen[g.area] += state.mech_mw[i];
    }
    let inj0 = gen[0] + alg.battery_mw + inp.solar_mw - der_mw - inp.load_internal_mw;
    let inj1 = gen[1] - inp.load_external_mw;
    [
        p.inertia(0) * d[0] - (inj0 - p.damping(0) * state.df[0] - state.tie_mw),
        p.inertia(1) * d[1] - (inj1 - p.damping(1) * state.df[1] + state.tie_mw),
    ]
}
