use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    request_probability, step_soc, DeviceError, DeviceMode, DeviceParams, DeviceState, Direction,
    DrawProcess,
};
use crate::protocol::{ForcedPacket, OptOutEdge, PacketMessage};

/// How a device leaves an opt-out it entered at a deadband edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptOutRecovery {
    /// Consume one forced packet, then re-evaluate.
    #[default]
    PacketLength,
    /// Keep charging (discharging) until the SoC is back at the setpoint.
    Setpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeviceConfig {
    pub tick_s: f64,
    /// A pending request with no answer after this long counts as rejected.
    pub response_timeout_s: f64,
    pub recovery: OptOutRecovery,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        Self {
            tick_s: 1.0,
            response_timeout_s: 2.0,
            recovery: OptOutRecovery::PacketLength,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceDiagnostics {
    pub requests_charge: u64,
    pub requests_discharge: u64,
    pub accepted: u64,
    pub rejected: u64,
    pub timeouts: u64,
    /// Responses that matched no pending request.
    pub stray_responses: u64,
    pub opt_outs_low: u64,
    pub opt_outs_high: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Pending {
    nonce: u64,
    direction: Direction,
    sent_at: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct Inbound {
    at: f64,
    accept: bool,
    nonce: u64,
}

/// One device running its own clock. Owns its state and random stream and
/// talks to the outside world only through [`PacketMessage`]s.
#[derive(Debug, Clone)]
pub struct DeviceActor {
    params: DeviceParams,
    state: DeviceState,
    draw: DrawProcess,
    config: DeviceConfig,
    rng: ChaCha8Rng,
    pending: Option<Pending>,
    inbox: Vec<Inbound>,
    diag: DeviceDiagnostics,
}

impl DeviceActor {
    pub fn new(
        params: DeviceParams,
        state: DeviceState,
        draw: DrawProcess,
        config: DeviceConfig,
        seed: u64,
    ) -> Result<Self, DeviceError> {
        params.validate()?;
        if !(config.tick_s > 0.0) {
            return Err(DeviceError::InvalidParams("tick must be positive".into()));
        }
        Ok(Self {
            params,
            state,
            draw,
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
            pending: None,
            inbox: Vec::new(),
            diag: DeviceDiagnostics::default(),
        })
    }

    pub fn params(&self) -> &DeviceParams {
        &self.params
    }

    pub fn state(&self) -> &DeviceState {
        &self.state
    }

    pub fn diagnostics(&self) -> &DeviceDiagnostics {
        &self.diag
    }

    pub fn has_pending_request(&self) -> bool {
        self.pending.is_some()
    }

    /// Hand a message from the channel to this device at time `at`. Only
    /// responses are meaningful; anything else is counted and dropped.
    pub fn deliver(&mut self, msg: &PacketMessage, at: f64) {
        match *msg {
            PacketMessage::Response { accept, nonce, .. } => {
                self.inbox.push(Inbound { at, accept, nonce })
            }
            _ => self.diag.stray_responses += 1,
        }
    }

    /// Grid power the device draws at `t`, counting responses already
    /// delivered but not yet folded into a tick.
    pub fn power_at(&self, t: f64) -> f64 {
        if self.state.mode == DeviceMode::Standby {
            if let Some(p) = self.pending {
                if self
                    .inbox
                    .iter()
                    .any(|m| m.at <= t && m.accept && m.nonce == p.nonce)
                {
                    return self.params.power_at(p.direction.zeta());
                }
            }
        }
        self.params.power_at(self.state.zeta)
    }

    fn next_nonce(&mut self) -> u64 {
        self.rng.random()
    }

    fn start_packet(&mut self, mode: DeviceMode, zeta: i8, length: f64, nonce: Option<u64>) {
        self.state.mode = mode;
        self.state.zeta = zeta;
        self.state.packet_time_remaining = length;
        self.state.active_nonce = nonce;
    }

    fn enter_standby(&mut self) {
        self.state.mode = DeviceMode::Standby;
        self.state.zeta = 0;
        self.state.packet_time_remaining = 0.0;
        self.state.active_nonce = None;
    }

    fn packet_running(&self) -> bool {
        match self.state.mode {
            DeviceMode::Charge | DeviceMode::Discharge => true,
            DeviceMode::OptOutLow | DeviceMode::OptOutHigh => {
                self.config.recovery == OptOutRecovery::PacketLength && self.state.zeta != 0
            }
            DeviceMode::Standby => false,
        }
    }

    /// Integrate SoC over [t0, t1], ending packets at their exact expiry.
    fn integrate(&mut self, t0: f64, t1: f64, draw_rate: f64) -> Result<(), DeviceError> {
        let mut t = t0;
        while t1 - t > 1e-12 {
            let mut seg = t1 - t;
            let expires = self.packet_running() && self.state.packet_time_remaining <= seg;
            if expires {
                seg = self.state.packet_time_remaining;
            }
            if seg > 0.0 {
                self.state.soc = step_soc(
                    self.state.soc,
                    self.state.zeta,
                    &self.params,
                    draw_rate * seg,
                    seg,
                )?;
            }
            if self.packet_running() {
                self.state.packet_time_remaining =
                    (self.state.packet_time_remaining - seg).max(0.0);
            }
            t += seg;
            if expires {
                self.enter_standby();
            }
        }
        Ok(())
    }

    fn apply_response(&mut self, m: &Inbound) {
        match self.pending {
            Some(p) if p.nonce == m.nonce => {
                self.pending = None;
                if m.accept {
                    self.diag.accepted += 1;
                    if self.state.mode == DeviceMode::Standby {
                        let mode = match p.direction {
                            Direction::Charge => DeviceMode::Charge,
                            Direction::Discharge => DeviceMode::Discharge,
                        };
                        let len = self.params.packet_length(p.direction);
                        self.start_packet(mode, p.direction.zeta(), len, Some(m.nonce));
                    }
                } else {
                    self.diag.rejected += 1;
                }
            }
            _ => self.diag.stray_responses += 1,
        }
    }

    fn opt_out(&mut self, edge: OptOutEdge, now: f64) -> PacketMessage {
        let cancels = self.state.active_nonce.take();
        self.pending = None;
        let nonce = self.next_nonce();
        let forced_dir = match edge {
            OptOutEdge::Low => Some(Direction::Charge),
            _ => self.params.can_discharge().then_some(Direction::Discharge),
        };
        let (mode, counter) = match edge {
            OptOutEdge::Low => (DeviceMode::OptOutLow, &mut self.diag.opt_outs_low),
            _ => (DeviceMode::OptOutHigh, &mut self.diag.opt_outs_high),
        };
        *counter += 1;
        let forced = forced_dir.map(|d| {
            let len = match self.config.recovery {
                OptOutRecovery::PacketLength => self.params.packet_length(d),
                // Open-ended: the coordinator learns the end from the next
                // notice, so advertise no fixed length.
                OptOutRecovery::Setpoint => 0.0,
            };
            ForcedPacket {
                direction: d,
                rated_power_kw: self.params.rated_power(d),
                packet_length_s: len,
            }
        });
        match forced {
            Some(f) => self.start_packet(mode, f.direction.zeta(), f.packet_length_s, Some(nonce)),
            None => self.start_packet(mode, 0, 0.0, None),
        }
        PacketMessage::OptOutNotice {
            edge,
            forced,
            nonce,
            cancels,
            sent_at: now,
        }
    }

    /// Advance this device's clock to `now`, consuming delivered responses at
    /// their delivery instants, and return any messages it sends at `now`.
    pub fn tick(&mut self, now: f64) -> Result<Vec<PacketMessage>, DeviceError> {
        let t0 = self.state.local_clock;
        let dt = now - t0;
        if !(dt > 0.0) {
            return Err(DeviceError::Contract(format!(
                "tick must move forward ({t0} -> {now})"
            )));
        }
        let draw_kj = self.draw.sample(dt, &mut self.rng);
        let draw_rate = draw_kj / dt;

        let mut inbox = std::mem::take(&mut self.inbox);
        inbox.sort_by(|a, b| a.at.total_cmp(&b.at));
        let mut t = t0;
        for m in &inbox {
            let at = m.at.clamp(t, now);
            self.integrate(t, at, draw_rate)?;
            t = at;
            self.apply_response(m);
        }
        self.integrate(t, now, draw_rate)?;
        self.state.local_clock = now;

        let mut out = Vec::new();
        let (x, lo, hi) = (self.state.soc, self.params.lower, self.params.upper);
        match self.state.mode {
            DeviceMode::Standby | DeviceMode::Discharge if x < lo => {
                out.push(self.opt_out(OptOutEdge::Low, now));
            }
            DeviceMode::OptOutHigh if x < lo && self.params.can_discharge() => {
                out.push(self.opt_out(OptOutEdge::Low, now));
            }
            DeviceMode::Standby | DeviceMode::Charge | DeviceMode::OptOutLow if x > hi => {
                out.push(self.opt_out(OptOutEdge::High, now));
            }
            DeviceMode::OptOutHigh if self.state.zeta == 0 && x <= hi => self.enter_standby(),
            DeviceMode::OptOutLow
                if self.config.recovery == OptOutRecovery::Setpoint
                    && x >= self.params.setpoint =>
            {
                out.push(self.recovered(now));
            }
            DeviceMode::OptOutHigh
                if self.config.recovery == OptOutRecovery::Setpoint
                    && self.state.zeta != 0
                    && x <= self.params.setpoint =>
            {
                out.push(self.recovered(now));
            }
            _ => {}
        }

        if let Some(p) = self.pending {
            if now - p.sent_at >= self.config.response_timeout_s {
                self.pending = None;
                self.diag.timeouts += 1;
            }
        }

        if self.state.mode == DeviceMode::Standby && self.pending.is_none() {
            if let Some(req) = self.sample_request(now) {
                out.push(req);
            }
        }
        Ok(out)
    }

    /// End an open-ended opt-out; the notice cancels the forced packet.
    fn recovered(&mut self, now: f64) -> PacketMessage {
        let cancels = self.state.active_nonce;
        self.enter_standby();
        let nonce = self.next_nonce();
        PacketMessage::OptOutNotice {
            edge: OptOutEdge::Rejoin,
            forced: None,
            nonce,
            cancels,
            sent_at: now,
        }
    }

    fn sample_request(&mut self, now: f64) -> Option<PacketMessage> {
        let dt = self.config.tick_s;
        let x = self.state.soc;
        let g_c = request_probability(x, &self.params, dt, Direction::Charge);
        let g_d = if self.params.can_discharge() {
            request_probability(x, &self.params, dt, Direction::Discharge)
        } else {
            0.0
        };
        let u: f64 = self.rng.random();
        let direction = if u < g_c {
            Direction::Charge
        } else if u < g_c + (1.0 - g_c) * g_d {
            Direction::Discharge
        } else {
            return None;
        };
        match direction {
            Direction::Charge => self.diag.requests_charge += 1,
            Direction::Discharge => self.diag.requests_discharge += 1,
        }
        let nonce = self.next_nonce();
        self.pending = Some(Pending {
            nonce,
            direction,
            sent_at: now,
        });
        Some(PacketMessage::Request {
            direction,
            rated_power_kw: self.params.rated_power(direction),
            packet_length_s: self.params.packet_length(direction),
            nonce,
            sent_at: now,
        })
    }
}
