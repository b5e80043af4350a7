use std::collections::HashMap;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use rayon::prelude::*;
use serde::Deserialize;

use super::clock::{to_micros, to_secs, Micros, Pacer, Priority, Scheduler};
use super::metrics::{
    compute_metrics, percentile_sorted, EstRow, GridRow, RunMetrics, SocRow, Traces, TrackRow,
};
use super::scenario::{FleetGroup, InitialSoc, ReferenceSpec, Scenario, TimeMode};
use super::HarnessError;
use crate::coordinator::Coordinator;
use crate::device::{DeviceActor, DeviceParams, DeviceState, DrawProcess};
use crate::estimator::{estimated_soc, EstimatorState};
use crate::grid::{
    ingest_solar_profile, step_grid, GridInputs, GridParams, GridState, SolarSeries,
};
use crate::macromodel::{
    baseline_optimization, build_transition, fleet_soc, soc_limits, Baseline, BinGrid, FleetPmf,
    MacroConfig, Macromodel, Mode, SocLimits, TransitionData,
};
use crate::protocol::{
    Channel, ChannelStats, Delivery, InProcess, PacketMessage, TcpLoopback, Transport,
};

#[derive(Debug, Clone)]
pub struct RunResult {
    pub metrics: RunMetrics,
    pub traces: Traces,
    pub baseline: Option<Baseline>,
    pub limits: Option<SocLimits>,
    pub device_channel: ChannelStats,
    pub meter_channel: ChannelStats,
    pub wall_s: f64,
}

#[derive(Debug, Clone)]
enum Event {
    Grid(u64),
    Devices(u64),
    ToCoordinator(PacketMessage),
    ToDevice(usize, PacketMessage),
    Meter(u64),
    Report(u64),
}

#[derive(Debug, Deserialize)]
struct TracePoint {
    timestamp: f64,
    kw: f64,
}

/// Piecewise-linear series held constant past either end.
#[derive(Debug, Clone)]
struct Series {
    t: Vec<f64>,
    v: Vec<f64>,
}

impl Series {
    fn read(path: &Path) -> Result<Self, HarnessError> {
        let mut r = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)?;
        let (mut t, mut v) = (Vec::new(), Vec::new());
        for (i, rec) in r.deserialize::<TracePoint>().enumerate() {
            let p = rec?;
            if t.last().is_some_and(|&last| p.timestamp <= last) {
                return Err(HarnessError::Scenario(format!(
                    "{}: row {}: timestamps must increase",
                    path.display(),
                    i + 2
                )));
            }
            t.push(p.timestamp);
            v.push(p.kw);
        }
        if t.is_empty() {
            return Err(HarnessError::Scenario(format!(
                "{}: empty trace",
                path.display()
            )));
        }
        Ok(Self { t, v })
    }

    fn at(&self, x: f64) -> f64 {
        let i = self.t.partition_point(|&ti| ti <= x);
        if i == 0 {
            return self.v[0];
        }
        if i == self.t.len() {
            return self.v[i - 1];
        }
        let (t0, t1) = (self.t[i - 1], self.t[i]);
        self.v[i - 1] + (x - t0) / (t1 - t0) * (self.v[i] - self.v[i - 1])
    }
}

enum Reference {
    Fixed(f64),
    Steps(Vec<f64>, Vec<f64>, f64),
    Sines(f64, Vec<(f64, f64, f64)>),
    Trace(Series, f64),
    Grid,
}

impl Reference {
    fn at(&self, t: f64) -> f64 {
        match self {
            Reference::Fixed(v) => *v,
            Reference::Steps(times, values, base) => {
                let i = times.partition_point(|&ti| ti <= t);
                base + values[i.saturating_sub(1)]
            }
            Reference::Sines(offset, comps) => {
                offset
                    + comps
                        .iter()
                        .map(|&(a, p, ph)| a * (2.0 * std::f64::consts::PI * t / p + ph).sin())
                        .sum::<f64>()
            }
            Reference::Trace(s, base) => base + s.at(t),
            Reference::Grid => f64::NAN,
        }
    }
}

struct GridLink {
    params: GridParams,
    state: GridState,
    dt: f64,
    solar: Option<(SolarSeries, f64)>,
    step_mw: f64,
    step_at: f64,
    /// Grid MW per fleet MW.
    scale: f64,
    nominal_mw: f64,
}

impl GridLink {
    fn solar_mw(&self, t: f64) -> f64 {
        let profile = self
            .solar
            .as_ref()
            .map_or(0.0, |(s, off)| s.at(t + off) - s.at(*off));
        let step = if t >= self.step_at { self.step_mw } else { 0.0 };
        profile + step
    }
}

struct Engine<'a> {
    sc: &'a Scenario,
    devices: Vec<DeviceActor>,
    group_of: Vec<usize>,
    coordinator: Coordinator,
    device_link: Channel,
    meter_link: Channel,
    transport: Box<dyn Transport>,
    routes: HashMap<u64, usize>,
    /// Shuffles the order in which one tick's messages reach the network.
    order_rng: ChaCha8Rng,
    sched: Scheduler<Event>,
    reference: Reference,
    estimator: Option<EstimatorState>,
    est_margin: f64,
    grid: Option<GridLink>,
    fleet_grid: Option<BinGrid>,
    limits: Option<SocLimits>,
    z_hat: f64,
    traces: Traces,
    end: Micros,
}

fn macro_data(sc: &Scenario, g: &FleetGroup) -> Result<TransitionData, HarnessError> {
    let cfg = MacroConfig {
        n_b: sc.bins,
        dt_s: sc.report_interval_s,
        device_tick_s: sc.device.tick_s,
        n_devices: g.count as f64,
        mean_draw_kw: g.mean_draw_kw(),
        base_kw: 0.0,
    };
    Ok(build_transition(&g.mean_params(), &cfg)?)
}

fn initial_soc<R: Rng>(
    g: &FleetGroup,
    p: &DeviceParams,
    stationary: Option<&(BinGrid, WeightedIndex<f64>)>,
    rng: &mut R,
) -> f64 {
    match g.initial {
        InitialSoc::Setpoint => p.setpoint,
        InitialSoc::Uniform => rng.random_range(p.lower..p.upper),
        InitialSoc::Stationary => {
            let (grid, w) = stationary.expect("stationary marginal prepared");
            let bin = w.sample(rng);
            grid.lower + (bin as f64 + rng.random::<f64>()) * grid.width()
        }
    }
}

fn mode_of(zeta: i8) -> Mode {
    match zeta {
        1 => Mode::Charge,
        -1 => Mode::Discharge,
        _ => Mode::Standby,
    }
}

impl<'a> Engine<'a> {
    fn new(
        sc: &'a Scenario,
        baseline: Option<&Baseline>,
        limits: Option<SocLimits>,
        td: Option<&TransitionData>,
    ) -> Result<Self, HarnessError> {
        let mut master = ChaCha8Rng::seed_from_u64(sc.seed);
        let mut param_rng = ChaCha8Rng::seed_from_u64(master.random());
        let device_seed: u64 = master.random();
        let meter_seed: u64 = master.random();

        let stationary = match (baseline, td) {
            (Some(b), Some(td)) if sc.fleet[0].initial == InitialSoc::Stationary => {
                let w = WeightedIndex::new(b.q.marginal())
                    .map_err(|e| HarnessError::Scenario(format!("stationary marginal: {e}")))?;
                Some((td.grid, w))
            }
            _ => None,
        };
        let mut devices = Vec::with_capacity(sc.device_count());
        let mut group_of = Vec::with_capacity(sc.device_count());
        for (gi, g) in sc.fleet.iter().enumerate() {
            for _ in 0..g.count {
                let p = g.sample_params(&mut param_rng);
                let x0 = initial_soc(g, &p, stationary.as_ref(), &mut param_rng);
                let draw = g
                    .draw_spec()
                    .map_or_else(DrawProcess::none, |d| d.process());
                let seed: u64 = master.random();
                devices.push(DeviceActor::new(
                    p,
                    DeviceState::standby(x0),
                    draw,
                    sc.device,
                    seed,
                )?);
                group_of.push(gi);
            }
        }
        let order_rng = ChaCha8Rng::seed_from_u64(master.random());

        let reference = {
            let base = baseline.map_or(0.0, |b| b.p_nom_kw);
            let rel = |r: bool| if r { base } else { 0.0 };
            match &sc.reference {
                ReferenceSpec::Constant { kw } => Reference::Fixed(*kw),
                ReferenceSpec::Baseline { offset_kw } => Reference::Fixed(base + offset_kw),
                ReferenceSpec::Steps {
                    times_s,
                    values_kw,
                    relative_to_baseline,
                } => Reference::Steps(
                    times_s.clone(),
                    values_kw.clone(),
                    rel(*relative_to_baseline),
                ),
                ReferenceSpec::Sines {
                    offset_kw,
                    components,
                    relative_to_baseline,
                } => Reference::Sines(
                    rel(*relative_to_baseline) + offset_kw,
                    components
                        .iter()
                        .map(|c| (c.amplitude_kw, c.period_s, c.phase_rad))
                        .collect(),
                ),
                ReferenceSpec::File {
                    path,
                    relative_to_baseline,
                } => Reference::Trace(Series::read(&sc.resolve(path))?, rel(*relative_to_baseline)),
                ReferenceSpec::Grid => Reference::Grid,
            }
        };

        let estimator = match (&sc.estimator, baseline, td) {
            (Some(spec), Some(b), Some(td)) => {
                // Same start as the devices: everyone in standby.
                let n = td.grid.n_b;
                let mut q0 = FleetPmf::zeros(n);
                match sc.fleet[0].initial {
                    InitialSoc::Stationary => q0.q[n..2 * n].copy_from_slice(&b.q.marginal()),
                    InitialSoc::Uniform => q0 = FleetPmf::uniform_standby(n),
                    InitialSoc::Setpoint => {
                        let x = sc.fleet[0].setpoint;
                        q0.q[n + td.grid.bin_of(x)] = 1.0;
                    }
                }
                let model = Macromodel::new(td.clone(), &q0);
                let mut cfg = spec.config;
                if cfg.nominal_kw <= 0.0 {
                    cfg.nominal_kw = b.p_nom_kw;
                }
                Some(EstimatorState::new(model, cfg))
            }
            _ => None,
        };

        let grid = match (&sc.grid, baseline, limits) {
            (Some(gs), Some(b), Some(lim)) => {
                let fleet_mw = b.p_nom_kw / 1000.0;
                let nominal_mw = gs.der_nominal_mw.unwrap_or(fleet_mw);
                let scale = nominal_mw / fleet_mw;
                let mut params = GridParams::vermont();
                if let Some(a) = gs.agc_scale {
                    params.agc_scale = a;
                }
                let cap_kw: f64 = devices.iter().map(|d| d.params().charge_power_kw).sum();
                if let Some(d) = params.der.as_mut() {
                    d.nominal_mw = nominal_mw;
                    d.capacity_mw = cap_kw / 1000.0 * scale;
                    d.z_lower = lim.z_lower;
                    d.z_upper = lim.z_upper;
                }
                params.validate()?;
                let solar = match &gs.solar_file {
                    Some(p) => Some((
                        ingest_solar_profile(&sc.resolve(p), gs.dt_s)?,
                        gs.solar_offset_s,
                    )),
                    None => None,
                };
                Some(GridLink {
                    state: GridState::new(&params),
                    params,
                    dt: gs.dt_s,
                    solar,
                    step_mw: gs.solar_step_mw,
                    step_at: gs.solar_step_at_s,
                    scale,
                    nominal_mw,
                })
            }
            _ => None,
        };

        let transport: Box<dyn Transport> = match sc.time_mode {
            TimeMode::Virtual => Box::new(InProcess::default()),
            TimeMode::RealTime => Box::new(TcpLoopback::open()?),
        };
        let single = sc.fleet.len() == 1;
        let fleet_grid = if single {
            Some(BinGrid::new(sc.bins, sc.fleet[0].lower, sc.fleet[0].upper)?)
        } else {
            None
        };
        let mut engine = Self {
            sc,
            devices,
            group_of,
            coordinator: Coordinator::new(sc.coordinator),
            device_link: Channel::new(sc.channel.clone(), device_seed),
            meter_link: Channel::new(sc.channel.clone(), meter_seed),
            transport,
            routes: HashMap::new(),
            order_rng,
            sched: Scheduler::new(),
            reference,
            estimator,
            est_margin: sc.estimator.as_ref().map_or(0.05, |e| e.margin),
            grid,
            fleet_grid,
            limits,
            z_hat: 0.5,
            traces: Traces::default(),
            end: to_micros(sc.duration_s),
        };
        engine.z_hat = engine.true_z().unwrap_or(0.5);
        if let Some(e) = &engine.estimator {
            engine.z_hat = estimated_soc(e, 0.0, 1.0, 0.0).z;
        }
        Ok(engine)
    }

    fn true_z(&self) -> Option<f64> {
        let g = &self.sc.fleet[0];
        if self.sc.fleet.len() != 1 {
            return None;
        }
        let xs: Vec<f64> = self.devices.iter().map(|d| d.state().soc).collect();
        fleet_soc(&xs, g.lower, g.upper).ok()
    }

    fn fleet_kw(&self, t: f64) -> f64 {
        self.devices.iter().map(|d| d.power_at(t)).sum()
    }

    fn schedule_at(&mut self, at: Micros, p: Priority, e: Event) {
        if at <= self.end {
            self.sched.schedule(at, p, e);
        }
    }

    fn grid_period(&self) -> Micros {
        self.grid.as_ref().map_or(1_000_000, |g| to_micros(g.dt))
    }

    fn seed_events(&mut self) {
        if self.end <= 0 {
            return;
        }
        self.schedule_at(0, Priority::Grid, Event::Grid(0));
        self.schedule_at(1_000_000, Priority::Devices, Event::Devices(1));
        self.schedule_at(1_000_000, Priority::Meter, Event::Meter(1));
        let r = to_micros(self.sc.report_interval_s);
        self.schedule_at(r, Priority::Estimator, Event::Report(1));
    }

    fn carry_and_send(
        &mut self,
        msg: PacketMessage,
        now: f64,
        meter: bool,
    ) -> Result<Option<(PacketMessage, f64)>, HarnessError> {
        let wire = self.transport.carry(&msg)?;
        let link = if meter {
            &mut self.meter_link
        } else {
            &mut self.device_link
        };
        Ok(match link.send(wire, now) {
            Delivery::Scheduled { msg, deliver_at } => Some((msg, deliver_at)),
            Delivery::Dropped => None,
        })
    }

    fn on_grid(&mut self, k: u64, now: f64) -> Result<(), HarnessError> {
        let period = self.grid_period();
        self.schedule_at(to_micros(now) + period, Priority::Grid, Event::Grid(k + 1));
        if self.grid.is_none() {
            let r = self.reference.at(now);
            self.coordinator.set_reference(r);
            return Ok(());
        }
        let fleet_kw = self.fleet_kw(now);
        let z_hat = self.z_hat;
        let link = self.grid.as_mut().expect("grid present");
        let measured = fleet_kw / 1000.0 * link.scale - link.nominal_mw;
        // The fleet starts in standby; until warm it is taken to follow its command.
        let warm = now >= self.sc.warmup_s;
        let inputs = GridInputs {
            solar_mw: link.solar_mw(now),
            der_actual_mw: warm.then_some(measured),
            z_hat,
            ..Default::default()
        };
        step_grid(&mut link.state, &link.params, &inputs, link.dt)?;
        let p_ref_kw = (link.nominal_mw + link.state.der_cmd_mw) * 1000.0 / link.scale;
        let per_second = (1.0 / link.dt).round() as u64;
        if k.is_multiple_of(per_second) {
            let s = &link.state;
            let p = &link.params;
            let gen = |name: &str| s.generator_mw(p, name).unwrap_or(0.0);
            self.traces.grid.push(GridRow {
                t: now,
                df_int_hz: s.df[0],
                df_ext_hz: s.df[1],
                tie_mw: s.tie_mw,
                ace_int_mw: s.ace(p, 0),
                ace_ext_mw: s.ace(p, 1),
                external_mw: gen("external"),
                local1_mw: gen("local1"),
                local2_mw: gen("local2"),
                battery_mw: s.battery_mw,
                battery_mwh: s.battery_mwh,
                der_cmd_mw: s.der_cmd_mw,
                der_actual_mw: if warm { measured } else { s.der_cmd_mw },
                solar_mw: inputs.solar_mw,
                z_hat,
            });
        }
        self.coordinator.set_reference(p_ref_kw);
        Ok(())
    }

    fn on_devices(&mut self, k: u64, now: f64) -> Result<(), HarnessError> {
        self.schedule_at(
            to_micros(now) + 1_000_000,
            Priority::Devices,
            Event::Devices(k + 1),
        );
        let results: Vec<_> = self.devices.par_iter_mut().map(|d| d.tick(now)).collect();
        let mut sent = Vec::new();
        for (i, r) in results.into_iter().enumerate() {
            let msgs = r?;
            if !msgs.is_empty() {
                sent.push((i, msgs));
            }
        }
        // A fixed send order would let low-index devices win every close call.
        sent.shuffle(&mut self.order_rng);
        for (i, msg) in sent
            .into_iter()
            .flat_map(|(i, ms)| ms.into_iter().map(move |m| (i, m)))
        {
            let nonce = msg.nonce();
            let is_request = matches!(msg, PacketMessage::Request { .. });
            if is_request {
                if let Some(n) = nonce {
                    self.routes.insert(n, i);
                }
            }
            match self.carry_and_send(msg, now, false)? {
                Some((m, at)) => {
                    self.schedule_at(to_micros(at), Priority::Delivery, Event::ToCoordinator(m))
                }
                None => {
                    if let (true, Some(n)) = (is_request, nonce) {
                        self.routes.remove(&n);
                    }
                }
            }
        }
        Ok(())
    }

    fn on_coordinator(&mut self, msg: PacketMessage, now: f64) -> Result<(), HarnessError> {
        match msg {
            PacketMessage::Request { nonce, .. } => {
                let resp = self.coordinator.handle_request(&msg, now)?;
                if let Some(dev) = self.routes.remove(&nonce) {
                    if let Some((m, at)) = self.carry_and_send(resp, now, false)? {
                        self.schedule_at(
                            to_micros(at),
                            Priority::Delivery,
                            Event::ToDevice(dev, m),
                        );
                    }
                }
            }
            PacketMessage::OptOutNotice { .. } => self.coordinator.handle_opt_out(&msg, now)?,
            PacketMessage::DemandMeasurement {
                measured_demand_kw,
                sent_at,
            } => self
                .coordinator
                .on_measurement(measured_demand_kw, sent_at, now)?,
            PacketMessage::Response { .. } => {}
        }
        Ok(())
    }

    fn on_meter(&mut self, k: u64, now: f64) -> Result<(), HarnessError> {
        self.schedule_at(
            to_micros(now) + 1_000_000,
            Priority::Meter,
            Event::Meter(k + 1),
        );
        self.coordinator.advance_to(now)?;
        let p_true = self.fleet_kw(now);
        self.traces.tracking.push(TrackRow {
            t: now,
            p_ref_kw: self.coordinator.reference(),
            p_true_kw: p_true,
            p_est_kw: self.coordinator.estimate_kw(),
            p_feedback_kw: self.coordinator.demand_feedback(),
        });
        let every = self.sc.meter_interval_s.round() as u64;
        if k.is_multiple_of(every) {
            let m = PacketMessage::DemandMeasurement {
                measured_demand_kw: p_true,
                sent_at: now,
            };
            if let Some((m, at)) = self.carry_and_send(m, now, true)? {
                self.schedule_at(to_micros(at), Priority::Delivery, Event::ToCoordinator(m));
            }
        }
        Ok(())
    }

    fn soc_rows(&mut self, now: f64) {
        for (gi, g) in self.sc.fleet.iter().enumerate() {
            let span = g.upper - g.lower;
            let mut z: Vec<f64> = self
                .devices
                .iter()
                .zip(&self.group_of)
                .filter(|(_, &gg)| gg == gi)
                .map(|(d, _)| (d.state().soc - g.lower) / span)
                .collect();
            z.sort_by(f64::total_cmp);
            let n = z.len() as f64;
            self.traces.soc.push(SocRow {
                t: now,
                group: gi,
                mean: z.iter().sum::<f64>() / n,
                p10: percentile_sorted(&z, 10.0),
                p90: percentile_sorted(&z, 90.0),
                outside: z.iter().filter(|&&v| !(0.0..=1.0).contains(&v)).count() as f64 / n,
            });
        }
    }

    fn on_report(&mut self, k: u64, now: f64) -> Result<(), HarnessError> {
        let r = to_micros(self.sc.report_interval_s);
        self.schedule_at(
            to_micros(now) + r,
            Priority::Estimator,
            Event::Report(k + 1),
        );
        let rep = self.coordinator.report(now)?;
        self.soc_rows(now);
        let z_true = self.true_z().unwrap_or(f64::NAN);
        let ratio = |a: u64, b: u64| if b > 0 { a as f64 / b as f64 } else { f64::NAN };
        let mut row = EstRow {
            t: now,
            z_true,
            z_hat: f64::NAN,
            tv: f64::NAN,
            nis: f64::NAN,
            innovation_kw: f64::NAN,
            beta_c: ratio(rep.accepted_charge, rep.requests_charge),
            beta_d: ratio(rep.accepted_discharge, rep.requests_discharge),
            demand_kw: rep.demand_kw,
            requests_charge: rep.requests_charge,
            requests_discharge: rep.requests_discharge,
            accepted_charge: rep.accepted_charge,
            accepted_discharge: rep.accepted_discharge,
            opt_outs: rep.opt_outs,
        };
        if let Some(est) = self.estimator.as_mut() {
            let (bc, bd) = est.beta_from_counts(
                rep.requests_charge,
                rep.accepted_charge,
                rep.requests_discharge,
                rep.accepted_discharge,
            );
            let y = crate::estimator::Measurement {
                demand_kw: rep.demand_kw,
                requests_charge: rep.requests_charge as f64,
                requests_discharge: rep.requests_discharge as f64,
                opt_outs: rep.opt_outs as f64,
            };
            let stats = est.ekf_step(bc, bd, &y)?;
            let (lo, hi) = self.limits.map_or((0.0, 1.0), |l| (l.z_lower, l.z_upper));
            let z_hat = estimated_soc(est, lo, hi, self.est_margin).z;
            let grid = self.fleet_grid.as_ref().expect("single group");
            let truth = FleetPmf::from_samples(
                grid,
                self.devices
                    .iter()
                    .map(|d| (d.state().soc, mode_of(d.state().zeta))),
            );
            row.z_hat = z_hat;
            row.tv = est.prior_pmf().tv_distance(&truth);
            row.nis = stats.nis;
            row.innovation_kw = stats.innovation_demand_kw;
            row.beta_c = bc;
            row.beta_d = bd;
            self.z_hat = z_hat;
        } else if z_true.is_finite() {
            self.z_hat = z_true;
        }
        self.traces.estimator.push(row);
        Ok(())
    }

    fn run(&mut self) -> Result<(), HarnessError> {
        self.seed_events();
        let pacer = (self.sc.time_mode == TimeMode::RealTime).then(|| Pacer::new(self.sc.speedup));
        while let Some((at, _, ev)) = self.sched.pop() {
            let now = to_secs(at);
            if let Some(p) = &pacer {
                p.wait_until(now);
            }
            match ev {
                Event::Grid(k) => self.on_grid(k, now)?,
                Event::Devices(k) => self.on_devices(k, now)?,
                Event::ToCoordinator(m) => self.on_coordinator(m, now)?,
                Event::ToDevice(i, m) => self.devices[i].deliver(&m, now),
                Event::Meter(k) => self.on_meter(k, now)?,
                Event::Report(k) => self.on_report(k, now)?,
            }
        }
        Ok(())
    }
}

/// Baseline and SoC limits for a single-group scenario that needs them.
pub fn scenario_baseline(
    sc: &Scenario,
) -> Result<Option<(TransitionData, Baseline, Option<SocLimits>)>, HarnessError> {
    let g = &sc.fleet[0];
    let needs = sc.reference.needs_baseline()
        || sc.estimator.is_some()
        || sc.grid.is_some()
        || g.initial == InitialSoc::Stationary;
    if !needs || sc.fleet.len() != 1 {
        return Ok(None);
    }
    let td = macro_data(sc, g)?;
    let b = baseline_optimization(&td, g.setpoint)?;
    let lim = if sc.estimator.is_some() || sc.grid.is_some() {
        Some(soc_limits(&td)?)
    } else {
        None
    };
    Ok(Some((td, b, lim)))
}

/// Baseline for the first fleet group, whatever the scenario needs.
pub fn group_baseline(sc: &Scenario) -> Result<(Baseline, SocLimits), HarnessError> {
    let td = macro_data(sc, &sc.fleet[0])?;
    Ok((
        baseline_optimization(&td, sc.fleet[0].setpoint)?,
        soc_limits(&td)?,
    ))
}

fn run_inner(sc: &Scenario) -> Result<RunResult, HarnessError> {
    sc.validate()?;
    let started = std::time::Instant::now();
    let setup = scenario_baseline(sc)?;
    let (td, baseline, limits) = match setup {
        Some((td, b, l)) => (Some(td), Some(b), l),
        None => (None, None, None),
    };
    let mut engine = Engine::new(sc, baseline.as_ref(), limits, td.as_ref())?;
    engine.run()?;
    let rated = {
        let n = engine.devices.len().max(1) as f64;
        engine
            .devices
            .iter()
            .map(|d| d.params().charge_power_kw)
            .sum::<f64>()
            / n
    };
    let metrics = compute_metrics(
        &engine.traces,
        sc.warmup_s,
        baseline.as_ref().map(|b| b.p_nom_kw),
        rated,
    )?;
    Ok(RunResult {
        metrics,
        device_channel: engine.device_link.stats(),
        meter_channel: engine.meter_link.stats(),
        traces: std::mem::take(&mut engine.traces),
        baseline,
        limits,
        wall_s: started.elapsed().as_secs_f64(),
    })
}

/// Run a scenario to completion. Under virtual time the result depends only
/// on the scenario and its seed.
pub fn run_scenario(sc: &Scenario) -> Result<RunResult, HarnessError> {
    run_inner(sc).map_err(|e| match e {
        HarnessError::Scenario(_) => e,
        other => HarnessError::Run {
            scenario: sc.name.clone(),
            source: Box::new(other),
        },
    })
}
