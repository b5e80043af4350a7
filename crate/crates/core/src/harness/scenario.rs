use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::coordinator::CoordinatorConfig;
use crate::device::{DeviceClass, DeviceConfig, DeviceParams, DrawProcess};
use crate::estimator::EstimatorConfig;
use crate::protocol::ChannelModel;

/// A fixed value or a normal distribution truncated to positive values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Param {
    Fixed(f64),
    Normal { mean: f64, sd: f64 },
}

impl Param {
    pub fn mean(&self) -> f64 {
        match *self {
            Param::Fixed(v) => v,
            Param::Normal { mean, .. } => mean,
        }
    }

    pub fn is_fixed(&self) -> bool {
        matches!(self, Param::Fixed(_)) || matches!(self, Param::Normal { sd, .. } if *sd == 0.0)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Param::Fixed(v) => v,
            Param::Normal { mean, sd } => {
                let Ok(d) = Normal::new(mean, sd) else {
                    return mean;
                };
                for _ in 0..1000 {
                    let v = d.sample(rng);
                    if v > 0.0 {
                        return v;
                    }
                }
                mean
            }
        }
    }

    fn valid(&self) -> bool {
        match *self {
            Param::Fixed(v) => v > 0.0 && v.is_finite(),
            Param::Normal { mean, sd } => {
                mean > 0.0 && sd >= 0.0 && mean.is_finite() && sd.is_finite()
            }
        }
    }
}

/// Hot-water draw as Poisson heat pulses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrawSpec {
    pub rate_per_s: f64,
    pub mean_kj: f64,
    pub sd_kj: f64,
    pub duration_s: f64,
}

impl DrawSpec {
    pub fn standard_ewh() -> Self {
        Self {
            rate_per_s: 1.0 / 300.0,
            mean_kj: 333.0,
            sd_kj: 30.0,
            duration_s: 60.0,
        }
    }

    pub fn process(&self) -> DrawProcess {
        DrawProcess::new(self.rate_per_s, self.mean_kj, self.sd_kj, self.duration_s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitialSoc {
    /// Uniform over the deadband, all devices in standby.
    #[default]
    Uniform,
    Setpoint,
    /// Sampled from the SoC marginal of the baseline stationary distribution.
    Stationary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetGroup {
    pub count: usize,
    pub class: DeviceClass,
    pub power_kw: Param,
    #[serde(default)]
    pub tank_liters: Option<Param>,
    #[serde(default)]
    pub capacity_kwh: Option<Param>,
    pub setpoint: f64,
    pub lower: f64,
    pub upper: f64,
    #[serde(default)]
    pub request_rate: Option<f64>,
    #[serde(default)]
    pub packet_s: Option<f64>,
    /// Defaults to the standard EWH draw for water heaters and none for storage.
    #[serde(default)]
    pub draw: Option<DrawSpec>,
    #[serde(default)]
    pub initial: InitialSoc,
}

impl FleetGroup {
    fn build(&self, power: f64, size: f64) -> DeviceParams {
        let mut p = match self.class {
            DeviceClass::Ewh => {
                DeviceParams::ewh(power, size, self.setpoint, self.lower, self.upper)
            }
            DeviceClass::Ess => {
                DeviceParams::ess(power, size, self.setpoint, self.lower, self.upper)
            }
        };
        if let Some(r) = self.request_rate {
            p.request_rate = r;
        }
        if let Some(l) = self.packet_s {
            p.charge_packet_s = l;
            p.discharge_packet_s = l;
        }
        p
    }

    fn size_param(&self) -> Param {
        match self.class {
            DeviceClass::Ewh => self.tank_liters.unwrap_or(Param::Fixed(275.0)),
            DeviceClass::Ess => self.capacity_kwh.unwrap_or(Param::Fixed(13.5)),
        }
    }

    /// Parameters of a device at the group means.
    pub fn mean_params(&self) -> DeviceParams {
        self.build(self.power_kw.mean(), self.size_param().mean())
    }

    pub fn sample_params<R: Rng + ?Sized>(&self, rng: &mut R) -> DeviceParams {
        let power = self.power_kw.sample(rng);
        let size = self.size_param().sample(rng);
        self.build(power, size)
    }

    pub fn draw_spec(&self) -> Option<DrawSpec> {
        match (self.draw, self.class) {
            (Some(d), _) => Some(d),
            (None, DeviceClass::Ewh) => Some(DrawSpec::standard_ewh()),
            (None, DeviceClass::Ess) => None,
        }
    }

    pub fn mean_draw_kw(&self) -> f64 {
        self.draw_spec().map_or(0.0, |d| d.rate_per_s * d.mean_kj)
    }

    pub fn is_homogeneous(&self) -> bool {
        self.power_kw.is_fixed() && self.size_param().is_fixed()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sine {
    pub amplitude_kw: f64,
    pub period_s: f64,
    #[serde(default)]
    pub phase_rad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReferenceSpec {
    Constant {
        kw: f64,
    },
    /// The fleet's optimised baseline demand plus an offset.
    Baseline {
        #[serde(default)]
        offset_kw: f64,
    },
    /// Piecewise-constant: `values_kw[i]` from `times_s[i]` on.
    Steps {
        times_s: Vec<f64>,
        values_kw: Vec<f64>,
        #[serde(default)]
        relative_to_baseline: bool,
    },
    Sines {
        #[serde(default)]
        offset_kw: f64,
        components: Vec<Sine>,
        #[serde(default)]
        relative_to_baseline: bool,
    },
    /// CSV trace with `timestamp,kw` columns, linearly interpolated.
    File {
        path: PathBuf,
        #[serde(default)]
        relative_to_baseline: bool,
    },
    /// The grid's AGC sets the reference.
    Grid,
}

impl ReferenceSpec {
    pub fn needs_baseline(&self) -> bool {
        match self {
            ReferenceSpec::Baseline { .. } | ReferenceSpec::Grid => true,
            ReferenceSpec::Steps {
                relative_to_baseline,
                ..
            }
            | ReferenceSpec::Sines {
                relative_to_baseline,
                ..
            }
            | ReferenceSpec::File {
                relative_to_baseline,
                ..
            } => *relative_to_baseline,
            ReferenceSpec::Constant { .. } => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSpec {
    #[serde(default)]
    pub config: EstimatorConfig,
    /// Distance to a SoC limit that flags the estimate as near it.
    #[serde(default = "default_margin")]
    pub margin: f64,
}

fn default_margin() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default)]
    pub agc_scale: Option<f64>,
    /// Solar output CSV (`timestamp,mw`); deviations from its first sample
    /// drive the internal area.
    #[serde(default)]
    pub solar_file: Option<PathBuf>,
    /// Offset into the solar file at simulation time zero, s.
    #[serde(default)]
    pub solar_offset_s: f64,
    #[serde(default)]
    pub solar_step_mw: f64,
    #[serde(default)]
    pub solar_step_at_s: f64,
    /// Demand the simulated fleet stands for, MW. The fleet's own baseline
    /// is scaled up to this. Defaults to the fleet's own baseline.
    #[serde(default)]
    pub der_nominal_mw: Option<f64>,
    #[serde(default = "default_grid_dt")]
    pub dt_s: f64,
}

fn default_grid_dt() -> f64 {
    0.1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TimeMode {
    #[default]
    Virtual,
    RealTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub duration_s: f64,
    #[serde(default = "default_warmup")]
    pub warmup_s: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub time_mode: TimeMode,
    #[serde(default = "default_speedup")]
    pub speedup: f64,
    /// Metering period, s; a multiple of the 1 s device tick.
    #[serde(default = "default_meter")]
    pub meter_interval_s: f64,
    /// Reporting and estimation period, s.
    #[serde(default = "default_report")]
    pub report_interval_s: f64,
    #[serde(default = "default_bins")]
    pub bins: usize,
    pub fleet: Vec<FleetGroup>,
    pub reference: ReferenceSpec,
    #[serde(default)]
    pub channel: ChannelModel,
    #[serde(default)]
    pub coordinator: CoordinatorConfig,
    #[serde(default)]
    pub device: DeviceConfig,
    #[serde(default)]
    pub estimator: Option<EstimatorSpec>,
    #[serde(default)]
    pub grid: Option<GridSpec>,
    /// Set by [`Scenario::load`]; relative paths resolve against it.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

fn default_warmup() -> f64 {
    600.0
}
fn default_speedup() -> f64 {
    1.0
}
fn default_meter() -> f64 {
    1.0
}
fn default_report() -> f64 {
    60.0
}
fn default_bins() -> usize {
    20
}

fn whole_seconds(v: f64) -> bool {
    v >= 1.0 && (v - v.round()).abs() < 1e-9
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Scenario(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Scenario(format!("{}: {e}", path.display())))?;
        let mut s = Self::from_toml(&text)?;
        s.base_dir = path.parent().map(Path::to_path_buf);
        Ok(s)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        match &self.base_dir {
            Some(b) if p.is_relative() => b.join(p),
            _ => p.to_path_buf(),
        }
    }

    pub fn device_count(&self) -> usize {
        self.fleet.iter().map(|g| g.count).sum()
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Scenario(m));
        if !(self.duration_s >= 0.0 && self.duration_s.is_finite()) {
            return bad(format!(
                "duration_s must be non-negative, got {}",
                self.duration_s
            ));
        }
        if !(self.warmup_s >= 0.0) {
            return bad("warmup_s must be non-negative".into());
        }
        if !(self.speedup >= 1.0) {
            return bad(format!("speedup must be at least 1, got {}", self.speedup));
        }
        if !whole_seconds(self.meter_interval_s) || !whole_seconds(self.report_interval_s) {
            return bad("meter and report intervals must be whole seconds".into());
        }
        if (self.device.tick_s - 1.0).abs() > 1e-12 {
            return bad("device tick must be 1 s".into());
        }
        if self.bins < 2 {
            return bad("bins must be at least 2".into());
        }
        if self.fleet.is_empty() {
            return bad("fleet has no groups".into());
        }
        for (i, g) in self.fleet.iter().enumerate() {
            if g.count == 0 {
                return bad(format!("fleet[{i}]: count must be positive"));
            }
            if !g.power_kw.valid() || !g.size_param().valid() {
                return bad(format!("fleet[{i}]: power and size must be positive"));
            }
            g.mean_params()
                .validate()
                .map_err(|e| HarnessError::Scenario(format!("fleet[{i}]: {e}")))?;
            if let Some(d) = g.draw {
                if !(d.rate_per_s >= 0.0
                    && d.mean_kj >= 0.0
                    && d.sd_kj >= 0.0
                    && d.duration_s >= 0.0)
                {
                    return bad(format!("fleet[{i}]: draw parameters must be non-negative"));
                }
            }
        }
        self.channel
            .validate()
            .map_err(|e| HarnessError::Scenario(format!("channel: {e}")))?;
        match &self.reference {
            ReferenceSpec::Steps {
                times_s, values_kw, ..
            } => {
                if times_s.is_empty() || times_s.len() != values_kw.len() {
                    return bad("reference steps need equal, non-empty times and values".into());
                }
                if times_s.windows(2).any(|w| w[1] <= w[0]) {
                    return bad("reference step times must increase".into());
                }
            }
            ReferenceSpec::Sines { components, .. } => {
                if components.iter().any(|c| !(c.period_s > 0.0)) {
                    return bad("sine periods must be positive".into());
                }
            }
            ReferenceSpec::Grid if self.grid.is_none() => {
                return bad("a grid reference needs a [grid] section".into());
            }
            _ => {}
        }
        let single = self.fleet.len() == 1;
        if (self.reference.needs_baseline() || self.estimator.is_some() || self.grid.is_some())
            && !single
        {
            return bad("baseline, estimator and grid coupling need a single fleet group".into());
        }
        if self.estimator.is_some() && !self.fleet[0].is_homogeneous() {
            return bad("the estimator needs a homogeneous fleet".into());
        }
        if self
            .fleet
            .iter()
            .any(|g| g.initial == InitialSoc::Stationary)
            && !single
        {
            return bad("stationary initial state needs a single fleet group".into());
        }
        if let Some(g) = &self.grid {
            if !(g.dt_s > 0.0 && g.dt_s <= 0.1) || !whole_seconds(1.0 / g.dt_s) {
                return bad("grid dt_s must divide 1 s and be at most 0.1 s".into());
            }
        }
        Ok(())
    }
}
