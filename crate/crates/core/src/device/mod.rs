//! Device-level models: state-of-charge dynamics, the stochastic packet
//! request law, end-use draws, and the device actor that ties them together.
//!
//! SoC units are device native: tank temperature in °C for water heaters and
//! percent of capacity for storage. Normalisation to a fleet SoC happens in
//! [`crate::macromodel::fleet_soc`].

mod actor;
mod draw;

pub use actor::{DeviceActor, DeviceConfig, DeviceDiagnostics, OptOutRecovery};
pub use draw::DrawProcess;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Specific heat of water, kJ/(kg·°C).
pub const SPECIFIC_HEAT: f64 = 4.186;
/// Density of water near 50 °C, kg/L.
pub const WATER_DENSITY: f64 = 0.990;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DeviceError {
    #[error("invalid device parameters: {0}")]
    InvalidParams(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeviceClass {
    Ewh,
    Ess,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Charge,
    Discharge,
}

impl Direction {
    /// Switch position ζ that a packet in this direction implies.
    pub fn zeta(self) -> i8 {
        match self {
            Direction::Charge => 1,
            Direction::Discharge => -1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Charge => "charge",
            Direction::Discharge => "discharge",
        }
    }
}

/// Physical and PEM parameters of one device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceParams {
    pub class: DeviceClass,
    pub charge_power_kw: f64,
    pub discharge_power_kw: f64,
    pub charge_efficiency: f64,
    pub discharge_efficiency: f64,
    pub setpoint: f64,
    pub lower: f64,
    pub upper: f64,
    /// Tank volume in litres (water heaters only).
    pub tank_liters: f64,
    /// Usable capacity in kWh (storage only).
    pub capacity_kwh: f64,
    /// Request rate constant m_R in 1/s.
    pub request_rate: f64,
    pub charge_packet_s: f64,
    pub discharge_packet_s: f64,
    pub ambient_c: f64,
    pub loss_time_constant_s: f64,
}

impl DeviceParams {
    pub const DEFAULT_REQUEST_RATE: f64 = 1.0 / 300.0;
    pub const DEFAULT_PACKET_S: f64 = 300.0;

    pub fn ewh(power_kw: f64, tank_liters: f64, setpoint: f64, lower: f64, upper: f64) -> Self {
        Self {
            class: DeviceClass::Ewh,
            charge_power_kw: power_kw,
            discharge_power_kw: 0.0,
            charge_efficiency: 1.0,
            discharge_efficiency: 1.0,
            setpoint,
            lower,
            upper,
            tank_liters,
            capacity_kwh: 0.0,
            request_rate: Self::DEFAULT_REQUEST_RATE,
            charge_packet_s: Self::DEFAULT_PACKET_S,
            discharge_packet_s: Self::DEFAULT_PACKET_S,
            ambient_c: 21.0,
            loss_time_constant_s: 150.0 * 3600.0,
        }
    }

    pub fn ess(power_kw: f64, capacity_kwh: f64, setpoint: f64, lower: f64, upper: f64) -> Self {
        Self {
            class: DeviceClass::Ess,
            charge_power_kw: power_kw,
            discharge_power_kw: power_kw,
            charge_efficiency: 1.0,
            discharge_efficiency: 1.0,
            setpoint,
            lower,
            upper,
            tank_liters: 0.0,
            capacity_kwh,
            request_rate: Self::DEFAULT_REQUEST_RATE,
            charge_packet_s: Self::DEFAULT_PACKET_S,
            discharge_packet_s: Self::DEFAULT_PACKET_S,
            ambient_c: 0.0,
            loss_time_constant_s: f64::INFINITY,
        }
    }

    pub fn validate(&self) -> Result<(), DeviceError> {
        let bad = |m: &str| Err(DeviceError::InvalidParams(m.to_string()));
        if !(self.lower < self.setpoint && self.setpoint < self.upper) {
            return bad("deadband must satisfy lower < setpoint < upper");
        }
        if !(self.charge_power_kw > 0.0) {
            return bad("charge power must be positive");
        }
        for (name, eta) in [
            ("charge efficiency", self.charge_efficiency),
            ("discharge efficiency", self.discharge_efficiency),
        ] {
            if !(eta > 0.0 && eta <= 1.0) {
                return bad(&format!("{name} must lie in (0, 1]"));
            }
        }
        if !(self.charge_packet_s > 0.0 && self.discharge_packet_s > 0.0) {
            return bad("packet lengths must be positive");
        }
        if !(self.request_rate > 0.0) {
            return bad("request rate must be positive");
        }
        match self.class {
            DeviceClass::Ewh => {
                if self.discharge_power_kw != 0.0 {
                    return bad("water heaters cannot discharge");
                }
                if !(self.tank_liters > 0.0) {
                    return bad("tank size must be positive");
                }
                if !(self.loss_time_constant_s > 0.0) {
                    return bad("standing-loss time constant must be positive");
                }
            }
            DeviceClass::Ess => {
                if !(self.discharge_power_kw > 0.0) {
                    return bad("storage discharge power must be positive");
                }
                if !(self.capacity_kwh > 0.0) {
                    return bad("storage capacity must be positive");
                }
            }
        }
        Ok(())
    }

    pub fn can_discharge(&self) -> bool {
        self.class == DeviceClass::Ess
    }

    /// Thermal mass cρL of a water heater in kJ/°C.
    pub fn thermal_mass(&self) -> f64 {
        SPECIFIC_HEAT * WATER_DENSITY * self.tank_liters
    }

    pub fn rated_power(&self, dir: Direction) -> f64 {
        match dir {
            Direction::Charge => self.charge_power_kw,
            Direction::Discharge => self.discharge_power_kw,
        }
    }

    pub fn packet_length(&self, dir: Direction) -> f64 {
        match dir {
            Direction::Charge => self.charge_packet_s,
            Direction::Discharge => self.discharge_packet_s,
        }
    }

    /// Net grid power drawn at switch position `zeta` (negative when injecting).
    pub fn power_at(&self, zeta: i8) -> f64 {
        match zeta {
            1 => self.charge_power_kw,
            -1 => -self.discharge_power_kw,
            _ => 0.0,
        }
    }

    /// SoC units gained per second per kW of input through switch `zeta`.
    fn input_gain(&self, zeta: i8) -> f64 {
        let eta = if zeta < 0 {
            self.discharge_efficiency
        } else {
            self.charge_efficiency
        };
        match self.class {
            DeviceClass::Ewh => eta / self.thermal_mass(),
            DeviceClass::Ess => eta * 100.0 / (self.capacity_kwh * 3600.0),
        }
    }

    /// Deterministic SoC drift (units/s) at switch position `zeta`, without
    /// end-use draws. Standing losses decay toward ambient.
    pub fn soc_rate(&self, x: f64, zeta: i8) -> f64 {
        let input = self.input_gain(zeta) * self.power_at(zeta);
        match self.class {
            DeviceClass::Ewh => input - (x - self.ambient_c) / self.loss_time_constant_s,
            DeviceClass::Ess => input,
        }
    }

    /// SoC units lost per kJ of end-use draw.
    pub fn draw_gain(&self) -> f64 {
        match self.class {
            DeviceClass::Ewh => 1.0 / self.thermal_mass(),
            DeviceClass::Ess => 0.0,
        }
    }

    /// Request rate μ(x) in 1/s; `f64::INFINITY` at or beyond the edge that
    /// forces a request.
    pub fn request_rate_at(&self, x: f64, dir: Direction) -> f64 {
        let (lo, hi, set) = (self.lower, self.upper, self.setpoint);
        match dir {
            Direction::Charge => {
                if x >= hi {
                    0.0
                } else if x <= lo {
                    f64::INFINITY
                } else {
                    self.request_rate * ((hi - x) / (x - lo)) * ((set - lo) / (hi - set))
                }
            }
            Direction::Discharge => {
                if !self.can_discharge() || x <= lo {
                    0.0
                } else if x >= hi {
                    f64::INFINITY
                } else {
                    self.request_rate * ((x - lo) / (hi - x)) * ((hi - set) / (set - lo))
                }
            }
        }
    }
}

/// One-step SoC update x[k+1] = x[k] + Δt·(φ_ζ P_ζ ζ + φ_s x + φ_u).
///
/// `draw_kj` is the end-use heat removed over the step (ignored for storage).
pub fn step_soc(
    x: f64,
    zeta: i8,
    params: &DeviceParams,
    draw_kj: f64,
    dt: f64,
) -> Result<f64, DeviceError> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(DeviceError::Contract(format!(
            "step length must be positive, got {dt}"
        )));
    }
    if !x.is_finite() || !draw_kj.is_finite() {
        return Err(DeviceError::Contract("non-finite state".into()));
    }
    if zeta < 0 && !params.can_discharge() {
        return Err(DeviceError::Contract(
            "water heater cannot discharge".into(),
        ));
    }
    Ok(x + dt * params.soc_rate(x, zeta) - draw_kj * params.draw_gain())
}

/// Probability g_μ = 1 − exp(−μ(x)Δt) of requesting a packet within Δt.
pub fn request_probability(x: f64, params: &DeviceParams, dt: f64, dir: Direction) -> f64 {
    debug_assert!(dt > 0.0);
    let mu = params.request_rate_at(x, dir);
    if mu.is_infinite() {
        1.0
    } else {
        -(-mu * dt).exp_m1()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceMode {
    Charge,
    Discharge,
    Standby,
    OptOutLow,
    OptOutHigh,
}

/// Mutable state owned by exactly one device actor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceState {
    pub soc: f64,
    pub zeta: i8,
    pub mode: DeviceMode,
    pub packet_time_remaining: f64,
    pub local_clock: f64,
    /// Nonce of the packet currently being consumed, if any.
    pub active_nonce: Option<u64>,
}

impl DeviceState {
    pub fn standby(soc: f64) -> Self {
        Self {
            soc,
            zeta: 0,
            mode: DeviceMode::Standby,
            packet_time_remaining: 0.0,
            local_clock: 0.0,
            active_nonce: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_ewh() -> DeviceParams {
        DeviceParams::ewh(4.5, 275.0, 52.0, 48.9, 55.1)
    }

    #[test]
    fn ess_standby_holds_soc() {
        let p = DeviceParams::ess(5.0, 13.5, 75.0, 55.0, 95.0);
        for dt in [0.1, 1.0, 60.0, 3600.0] {
            assert_eq!(step_soc(70.0, 0, &p, 123.0, dt).unwrap(), 70.0);
        }
    }

    #[test]
    fn ewh_heating_rate_matches_hand_value() {
        // 4.5 kW · 1 s / (4.186 · 0.990 · 275 kJ/°C) = 0.0039486... °C,
        // evaluated independently below; standing loss at 52 °C subtracts
        // (52 − 21)/540000.
        let p = reference_ewh();
        let heating = 4.5 / 1139.6385;
        let loss = 31.0 / 540_000.0;
        let x1 = step_soc(52.0, 1, &p, 0.0, 1.0).unwrap();
        assert!((x1 - 52.0 - (heating - loss)).abs() < 1e-9, "{}", x1 - 52.0);
        assert!((heating - 0.003_948_6).abs() < 1e-7);
    }

    #[test]
    fn ewh_at_ambient_is_equilibrium() {
        let p = reference_ewh();
        assert_eq!(step_soc(21.0, 0, &p, 0.0, 1.0).unwrap(), 21.0);
    }

    #[test]
    fn standing_loss_decays_toward_ambient() {
        let p = reference_ewh();
        assert!(step_soc(52.0, 0, &p, 0.0, 60.0).unwrap() < 52.0);
        assert!(step_soc(15.0, 0, &p, 0.0, 60.0).unwrap() > 15.0);
    }

    #[test]
    fn draw_removes_heat() {
        let p = reference_ewh();
        let x = step_soc(52.0, 0, &p, p.thermal_mass(), 1.0).unwrap();
        assert!((x - (52.0 - 1.0 - 31.0 / 540_000.0)).abs() < 1e-12);
    }

    #[test]
    fn step_soc_rejects_bad_input() {
        let p = reference_ewh();
        assert!(step_soc(52.0, 0, &p, 0.0, 0.0).is_err());
        assert!(step_soc(52.0, 0, &p, 0.0, -1.0).is_err());
        assert!(step_soc(f64::NAN, 0, &p, 0.0, 1.0).is_err());
        assert!(step_soc(52.0, -1, &p, 0.0, 1.0).is_err());
    }

    #[test]
    fn request_probability_boundaries() {
        let p = reference_ewh();
        assert_eq!(request_probability(55.1, &p, 1.0, Direction::Charge), 0.0);
        assert_eq!(request_probability(56.0, &p, 1.0, Direction::Charge), 0.0);
        assert_eq!(request_probability(48.9, &p, 1.0, Direction::Charge), 1.0);
        assert_eq!(request_probability(40.0, &p, 1.0, Direction::Charge), 1.0);
    }

    #[test]
    fn request_probability_at_setpoint() {
        // Both ratio factors cancel at the setpoint, leaving μ = m_R.
        let p = reference_ewh();
        let dt = 1.0;
        let expect = 1.0 - (-p.request_rate * dt).exp();
        let got = request_probability(52.0, &p, dt, Direction::Charge);
        assert!((got - expect).abs() < 1e-15);
    }

    #[test]
    fn discharge_mirrors_charge() {
        let p = DeviceParams::ess(5.0, 13.5, 75.0, 55.0, 95.0);
        for x in [56.0, 60.0, 75.0, 88.0, 94.0] {
            let c = request_probability(x, &p, 1.0, Direction::Charge);
            let d = request_probability(150.0 - x, &p, 1.0, Direction::Discharge);
            assert!((c - d).abs() < 1e-14, "x={x}");
        }
        assert_eq!(
            request_probability(55.0, &p, 1.0, Direction::Discharge),
            0.0
        );
        assert_eq!(
            request_probability(95.0, &p, 1.0, Direction::Discharge),
            1.0
        );
        let ewh = reference_ewh();
        assert_eq!(
            request_probability(54.0, &ewh, 1.0, Direction::Discharge),
            0.0
        );
    }

    #[test]
    fn lossless_storage_is_reversible() {
        let p = DeviceParams::ess(5.0, 13.5, 75.0, 55.0, 95.0);
        let mut x = 70.0;
        for _ in 0..300 {
            x = step_soc(x, 1, &p, 0.0, 1.0).unwrap();
        }
        assert!(x > 70.0);
        for _ in 0..300 {
            x = step_soc(x, -1, &p, 0.0, 1.0).unwrap();
        }
        assert!((x - 70.0).abs() < 1e-9);
    }

    #[test]
    fn validate_catches_bad_deadband() {
        let mut p = reference_ewh();
        assert!(p.validate().is_ok());
        p.setpoint = 56.0;
        assert!(p.validate().is_err());
        let mut p = reference_ewh();
        p.discharge_power_kw = 1.0;
        assert!(p.validate().is_err());
    }
}
