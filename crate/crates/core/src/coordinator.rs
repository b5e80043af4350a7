//! The PEM coordinator: anonymous accept/reject decisions, per-packet timers
//! and real-time reconstruction of fleet demand.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::Direction;
use crate::protocol::{OptOutEdge, PacketMessage};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoordinatorError {
    #[error("timer {0} is not active")]
    UnknownTimer(u64),
    #[error("time went backwards: {from} -> {to}")]
    TimeReversal { from: f64, to: f64 },
}

/// How much tracking error must be available before a packet is granted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Headroom {
    /// Any error of the right sign.
    #[default]
    AnyPositive,
    /// At least the packet's rated power.
    FullRated,
}

/// Discharge-side acceptance test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DischargeRule {
    /// Mirror image of the charge test.
    #[default]
    Mirrored,
    /// Accept only while P_error < 0 and P_error + P₋₁ ≥ −θ_d, i.e. only when
    /// the packet does not overshoot the reference by more than θ_d.
    Bounded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackPolicy {
    /// Last metering value to arrive, however stale.
    Measured,
    /// Timer reconstruction only.
    Reconstructed,
    /// Reconstruction shifted by the offset seen at the last measurement.
    #[default]
    Blend,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoordinatorConfig {
    pub headroom: Headroom,
    pub discharge_rule: DischargeRule,
    /// θ_d for [`DischargeRule::Bounded`], kW.
    pub discharge_tolerance_kw: f64,
    pub feedback: FeedbackPolicy,
    /// Demand not under PEM control, kW.
    pub uncontrolled_base_kw: f64,
}

impl Default for CoordinatorConfig {
    fn default() -> Self {
        Self {
            headroom: Headroom::AnyPositive,
            discharge_rule: DischargeRule::Mirrored,
            discharge_tolerance_kw: 0.0,
            feedback: FeedbackPolicy::Blend,
            uncontrolled_base_kw: 0.0,
        }
    }
}

/// Accept/reject as a pure function of the tracking error and the request.
/// Nothing about the requester enters the decision.
pub fn decide(p_error: f64, direction: Direction, rated_kw: f64, cfg: &CoordinatorConfig) -> bool {
    let need = match cfg.headroom {
        Headroom::AnyPositive => 0.0,
        Headroom::FullRated => rated_kw,
    };
    match direction {
        Direction::Charge => p_error > 0.0 && p_error >= need,
        Direction::Discharge => match cfg.discharge_rule {
            DischargeRule::Mirrored => p_error < 0.0 && -p_error >= need,
            DischargeRule::Bounded => {
                p_error < 0.0 && p_error + rated_kw >= -cfg.discharge_tolerance_kw
            }
        },
    }
}

/// Aggregates for one reporting interval.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct IntervalReport {
    /// Time-average of the reconstructed demand over the interval, kW.
    pub demand_kw: f64,
    pub requests_charge: u64,
    pub requests_discharge: u64,
    pub accepted_charge: u64,
    pub accepted_discharge: u64,
    pub opt_outs: u64,
    pub opt_outs_low: u64,
    pub opt_outs_high: u64,
    pub malformed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Timer {
    expiry: f64,
    /// Signed power in µW so sums stay exact.
    power_uw: i64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct HeapKey(f64, u64);

impl Eq for HeapKey {}

impl PartialOrd for HeapKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

fn to_uw(kw: f64) -> i64 {
    (kw * 1e6).round() as i64
}

/// How long reconstruction history is retained for re-anchoring, s.
const HISTORY_S: f64 = 3600.0;

#[derive(Debug, Clone)]
pub struct Coordinator {
    config: CoordinatorConfig,
    p_ref_kw: f64,
    timers: HashMap<u64, Timer>,
    heap: BinaryHeap<Reverse<HeapKey>>,
    active_uw: i64,
    clock: f64,
    last_measured: Option<f64>,
    blend_offset: f64,
    history: VecDeque<(f64, f64)>,
    interval_start: f64,
    interval_energy: f64,
    counts: IntervalReport,
}

impl Coordinator {
    pub fn new(config: CoordinatorConfig) -> Self {
        let mut c = Self {
            config,
            p_ref_kw: 0.0,
            timers: HashMap::new(),
            heap: BinaryHeap::new(),
            active_uw: 0,
            clock: 0.0,
            last_measured: None,
            blend_offset: 0.0,
            history: VecDeque::new(),
            interval_start: 0.0,
            interval_energy: 0.0,
            counts: IntervalReport::default(),
        };
        c.history.push_back((0.0, c.estimate_kw()));
        c
    }

    pub fn config(&self) -> &CoordinatorConfig {
        &self.config
    }

    pub fn set_reference(&mut self, p_ref_kw: f64) {
        self.p_ref_kw = p_ref_kw;
    }

    pub fn reference(&self) -> f64 {
        self.p_ref_kw
    }

    pub fn active_timers(&self) -> usize {
        self.timers.len()
    }

    /// Timer-reconstructed fleet demand, kW.
    pub fn estimate_kw(&self) -> f64 {
        self.config.uncontrolled_base_kw + self.active_uw as f64 / 1e6
    }

    /// Last metering value received, if any.
    pub fn measured_kw(&self) -> Option<f64> {
        self.last_measured
    }

    /// Demand used in the tracking error under the configured policy.
    pub fn demand_feedback(&self) -> f64 {
        match self.config.feedback {
            FeedbackPolicy::Measured => self.last_measured.unwrap_or_else(|| self.estimate_kw()),
            FeedbackPolicy::Reconstructed => self.estimate_kw(),
            FeedbackPolicy::Blend => self.estimate_kw() + self.blend_offset,
        }
    }

    pub fn tracking_error(&self) -> f64 {
        self.p_ref_kw - self.demand_feedback()
    }

    fn set_active(&mut self, uw: i64) {
        self.active_uw = uw;
        let est = self.estimate_kw();
        let t = self.clock;
        match self.history.back_mut() {
            Some(last) if last.0 == t => last.1 = est,
            _ => self.history.push_back((t, est)),
        }
        while self.history.len() > 1 && self.history[1].0 < t - HISTORY_S {
            self.history.pop_front();
        }
    }

    /// Reconstruction value in force at time `t` (latest change at or before).
    pub fn estimate_at(&self, t: f64) -> f64 {
        let i = self.history.partition_point(|&(ts, _)| ts <= t);
        if i == 0 {
            self.history.front().map_or(self.estimate_kw(), |h| h.1)
        } else {
            self.history[i - 1].1
        }
    }

    fn accumulate(&mut self, to: f64) {
        self.interval_energy += self.estimate_kw() * (to - self.clock);
        self.clock = to;
    }

    /// Move the coordinator clock to `now`, expiring due timers in order.
    pub fn advance_to(&mut self, now: f64) -> Result<(), CoordinatorError> {
        if now < self.clock {
            return Err(CoordinatorError::TimeReversal {
                from: self.clock,
                to: now,
            });
        }
        while let Some(Reverse(HeapKey(t, nonce))) = self.heap.peek().copied() {
            if t > now {
                break;
            }
            self.heap.pop();
            // Cancelled timers leave stale heap entries behind.
            if self.timers.get(&nonce).is_some_and(|tm| tm.expiry == t) {
                self.accumulate(t);
                self.remove_timer(nonce);
            }
        }
        self.accumulate(now);
        Ok(())
    }

    fn add_timer(&mut self, nonce: u64, expiry: f64, signed_kw: f64) {
        let uw = to_uw(signed_kw);
        if let Some(old) = self.timers.insert(
            nonce,
            Timer {
                expiry,
                power_uw: uw,
            },
        ) {
            // Nonce reuse replaces the earlier packet.
            self.active_uw -= old.power_uw;
        }
        if expiry.is_finite() {
            self.heap.push(Reverse(HeapKey(expiry, nonce)));
        }
        self.set_active(self.active_uw + uw);
    }

    fn remove_timer(&mut self, nonce: u64) -> bool {
        match self.timers.remove(&nonce) {
            Some(tm) => {
                self.set_active(self.active_uw - tm.power_uw);
                true
            }
            None => false,
        }
    }

    /// Explicitly expire timer `nonce` at `now`.
    pub fn expire(&mut self, nonce: u64, now: f64) -> Result<(), CoordinatorError> {
        self.advance_to(now)?;
        if self.remove_timer(nonce) {
            Ok(())
        } else {
            Err(CoordinatorError::UnknownTimer(nonce))
        }
    }

    /// Decide on a request received at `now` and return the response.
    pub fn handle_request(
        &mut self,
        req: &PacketMessage,
        now: f64,
    ) -> Result<PacketMessage, CoordinatorError> {
        self.advance_to(now)?;
        let &PacketMessage::Request {
            direction,
            rated_power_kw,
            packet_length_s,
            nonce,
            ..
        } = req
        else {
            self.counts.malformed += 1;
            return Ok(PacketMessage::Response {
                accept: false,
                nonce: req.nonce().unwrap_or(0),
                sent_at: now,
            });
        };
        match direction {
            Direction::Charge => self.counts.requests_charge += 1,
            Direction::Discharge => self.counts.requests_discharge += 1,
        }
        let well_formed = rated_power_kw.is_finite()
            && rated_power_kw > 0.0
            && packet_length_s.is_finite()
            && packet_length_s > 0.0;
        if !well_formed {
            self.counts.malformed += 1;
        }
        let accept = well_formed
            && decide(
                self.tracking_error(),
                direction,
                rated_power_kw,
                &self.config,
            );
        if accept {
            let signed = match direction {
                Direction::Charge => {
                    self.counts.accepted_charge += 1;
                    rated_power_kw
                }
                Direction::Discharge => {
                    self.counts.accepted_discharge += 1;
                    -rated_power_kw
                }
            };
            self.add_timer(nonce, now + packet_length_s, signed);
        }
        Ok(PacketMessage::Response {
            accept,
            nonce,
            sent_at: now,
        })
    }

    /// Account for a device leaving PEM: drop the packet it abandoned and
    /// track any packet it forces on itself.
    pub fn handle_opt_out(
        &mut self,
        msg: &PacketMessage,
        now: f64,
    ) -> Result<(), CoordinatorError> {
        self.advance_to(now)?;
        if let &PacketMessage::OptOutNotice {
            edge,
            forced,
            nonce,
            cancels,
            ..
        } = msg
        {
            if let Some(c) = cancels {
                self.remove_timer(c);
            }
            match edge {
                OptOutEdge::Low => self.counts.opt_outs_low += 1,
                OptOutEdge::High => self.counts.opt_outs_high += 1,
                OptOutEdge::Rejoin => {}
            }
            if edge != OptOutEdge::Rejoin {
                self.counts.opt_outs += 1;
            }
            if let Some(f) = forced {
                let signed = f.rated_power_kw * f.direction.zeta() as f64;
                let expiry = if f.packet_length_s > 0.0 {
                    now + f.packet_length_s
                } else {
                    f64::INFINITY
                };
                self.add_timer(nonce, expiry, signed);
            }
        }
        Ok(())
    }

    /// A metering value sent at `sent_at` arrives at `now`.
    pub fn on_measurement(
        &mut self,
        demand_kw: f64,
        sent_at: f64,
        now: f64,
    ) -> Result<(), CoordinatorError> {
        self.advance_to(now)?;
        self.last_measured = Some(demand_kw);
        self.blend_offset = demand_kw - self.estimate_at(sent_at);
        Ok(())
    }

    /// Close the reporting interval ending at `now` and reset counters.
    pub fn report(&mut self, now: f64) -> Result<IntervalReport, CoordinatorError> {
        self.advance_to(now)?;
        let span = now - self.interval_start;
        let mut r = std::mem::take(&mut self.counts);
        r.demand_kw = if span > 0.0 {
            self.interval_energy / span
        } else {
            self.estimate_kw()
        };
        self.interval_start = now;
        self.interval_energy = 0.0;
        Ok(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::ForcedPacket;

    fn req(dir: Direction, kw: f64, nonce: u64) -> PacketMessage {
        PacketMessage::Request {
            direction: dir,
            rated_power_kw: kw,
            packet_length_s: 300.0,
            nonce,
            sent_at: 0.0,
        }
    }

    fn accepted(m: &PacketMessage) -> bool {
        matches!(m, PacketMessage::Response { accept: true, .. })
    }

    #[test]
    fn zero_error_accepts_nothing() {
        let mut c = Coordinator::new(CoordinatorConfig::default());
        c.set_reference(0.0);
        assert!(!accepted(
            &c.handle_request(&req(Direction::Charge, 4.5, 1), 0.0)
                .unwrap()
        ));
        assert!(!accepted(
            &c.handle_request(&req(Direction::Discharge, 5.0, 2), 0.0)
                .unwrap()
        ));
    }

    #[test]
    fn three_request_script_under_both_headroom_policies() {
        // P_error = 5 kW: first charge accepted under both, second only
        // under AnyPositive (0.5 kW left), third rejected by both.
        for (headroom, expect) in [
            (Headroom::AnyPositive, [true, true, false]),
            (Headroom::FullRated, [true, false, false]),
        ] {
            let mut c = Coordinator::new(CoordinatorConfig {
                headroom,
                ..CoordinatorConfig::default()
            });
            c.set_reference(5.0);
            let got: Vec<bool> = (0..3)
                .map(|i| {
                    accepted(
                        &c.handle_request(&req(Direction::Charge, 4.5, i), 0.0)
                            .unwrap(),
                    )
                })
                .collect();
            assert_eq!(got, expect, "{headroom:?}");
        }
    }

    #[test]
    fn discharge_restores_negative_error() {
        for rule in [DischargeRule::Mirrored, DischargeRule::Bounded] {
            let mut c = Coordinator::new(CoordinatorConfig {
                discharge_rule: rule,
                ..CoordinatorConfig::default()
            });
            c.set_reference(-5.0);
            assert!(accepted(
                &c.handle_request(&req(Direction::Discharge, 5.0, 1), 0.0)
                    .unwrap()
            ));
            assert_eq!(c.estimate_kw(), -5.0);
        }
    }

    #[test]
    fn bounded_rule_rejects_large_negative_error() {
        let cfg = CoordinatorConfig {
            discharge_rule: DischargeRule::Bounded,
            ..CoordinatorConfig::default()
        };
        assert!(!decide(-50.0, Direction::Discharge, 5.0, &cfg));
        assert!(decide(
            -50.0,
            Direction::Discharge,
            5.0,
            &CoordinatorConfig::default()
        ));
    }

    #[test]
    fn expiry_removes_exactly_rated_power() {
        let mut c = Coordinator::new(CoordinatorConfig::default());
        c.set_reference(100.0);
        c.handle_request(&req(Direction::Charge, 4.5, 7), 10.0)
            .unwrap();
        assert_eq!(c.estimate_kw(), 4.5);
        c.advance_to(309.999).unwrap();
        assert_eq!(c.estimate_kw(), 4.5);
        c.advance_to(310.0).unwrap();
        assert_eq!(c.estimate_kw(), 0.0);
        assert_eq!(c.active_timers(), 0);
    }

    #[test]
    fn double_expiry_is_an_error() {
        let mut c = Coordinator::new(CoordinatorConfig::default());
        c.set_reference(100.0);
        c.handle_request(&req(Direction::Charge, 4.5, 7), 0.0)
            .unwrap();
        c.expire(7, 1.0).unwrap();
        assert_eq!(c.expire(7, 2.0), Err(CoordinatorError::UnknownTimer(7)));
    }

    #[test]
    fn empty_timer_set_gives_base() {
        let mut c = Coordinator::new(CoordinatorConfig {
            uncontrolled_base_kw: 12.5,
            ..CoordinatorConfig::default()
        });
        c.advance_to(1000.0).unwrap();
        assert_eq!(c.estimate_kw(), 12.5);
    }

    #[test]
    fn opt_out_cancels_and_forces() {
        let mut c = Coordinator::new(CoordinatorConfig::default());
        c.set_reference(100.0);
        c.handle_request(&req(Direction::Charge, 4.5, 1), 0.0)
            .unwrap();
        // Cut-off at the upper edge cancels the packet.
        let cut = PacketMessage::OptOutNotice {
            edge: OptOutEdge::High,
            forced: None,
            nonce: 2,
            cancels: Some(1),
            sent_at: 5.0,
        };
        c.handle_opt_out(&cut, 5.0).unwrap();
        assert_eq!(c.estimate_kw(), 0.0);
        // Forced charge at the lower edge adds a timer of its own.
        let low = PacketMessage::OptOutNotice {
            edge: OptOutEdge::Low,
            forced: Some(ForcedPacket {
                direction: Direction::Charge,
                rated_power_kw: 4.5,
                packet_length_s: 300.0,
            }),
            nonce: 3,
            cancels: None,
            sent_at: 6.0,
        };
        c.handle_opt_out(&low, 6.0).unwrap();
        assert_eq!(c.estimate_kw(), 4.5);
        c.advance_to(306.0).unwrap();
        assert_eq!(c.estimate_kw(), 0.0);
        let r = c.report(306.0).unwrap();
        assert_eq!((r.opt_outs, r.opt_outs_low, r.opt_outs_high), (2, 1, 1));
    }

    #[test]
    fn interval_report_counts_and_resets() {
        let mut c = Coordinator::new(CoordinatorConfig::default());
        let empty = c.report(60.0).unwrap();
        assert_eq!(empty, IntervalReport::default());
        c.set_reference(9.0);
        let mut acc = 0;
        for i in 0..5 {
            if accepted(
                &c.handle_request(&req(Direction::Charge, 4.5, i), 60.0 + i as f64)
                    .unwrap(),
            ) {
                acc += 1;
            }
        }
        let r = c.report(120.0).unwrap();
        assert_eq!((r.requests_charge, r.accepted_charge), (5, acc));
        assert_eq!(acc, 2);
        // Two packets from t≈60–61 over a 60 s interval.
        assert!(
            (r.demand_kw - (9.0 * 60.0 - 4.5) / 60.0).abs() < 1e-9,
            "{}",
            r.demand_kw
        );
        assert_eq!(c.report(180.0).unwrap().requests_charge, 0);
    }

    #[test]
    fn reconstruction_sum_is_exact() {
        let mut c = Coordinator::new(CoordinatorConfig::default());
        c.set_reference(1e9);
        let powers = [4.1, 4.3, 4.7, 0.1, 0.2, 4.49999];
        for (i, p) in powers.iter().enumerate() {
            c.handle_request(&req(Direction::Charge, *p, i as u64), i as f64)
                .unwrap();
        }
        for i in 0..powers.len() {
            c.expire(i as u64, 10.0).unwrap();
        }
        assert_eq!(c.estimate_kw(), 0.0);
    }

    #[test]
    fn blend_reanchors_on_stale_measurement() {
        let mut c = Coordinator::new(CoordinatorConfig {
            feedback: FeedbackPolicy::Blend,
            ..CoordinatorConfig::default()
        });
        c.set_reference(100.0);
        c.handle_request(&req(Direction::Charge, 4.5, 1), 10.0)
            .unwrap();
        c.handle_request(&req(Direction::Charge, 4.5, 2), 20.0)
            .unwrap();
        // Meter read 6 kW at t=15 (reconstruction then 4.5), delivered at 30.
        c.on_measurement(6.0, 15.0, 30.0).unwrap();
        assert!((c.demand_feedback() - 10.5).abs() < 1e-12);
    }

    #[test]
    fn measured_policy_uses_latest_arrival() {
        let mut c = Coordinator::new(CoordinatorConfig {
            feedback: FeedbackPolicy::Measured,
            ..CoordinatorConfig::default()
        });
        c.on_measurement(50.0, 10.0, 10.0).unwrap();
        c.on_measurement(20.0, 1.0, 11.0).unwrap();
        assert_eq!(c.demand_feedback(), 20.0);
    }

    #[test]
    fn non_request_is_rejected_and_counted() {
        let mut c = Coordinator::new(CoordinatorConfig::default());
        c.set_reference(100.0);
        let bogus = PacketMessage::DemandMeasurement {
            measured_demand_kw: 1.0,
            sent_at: 0.0,
        };
        assert!(!accepted(&c.handle_request(&bogus, 0.0).unwrap()));
        assert!(!accepted(
            &c.handle_request(&req(Direction::Charge, f64::NAN, 3), 0.0)
                .unwrap()
        ));
        assert_eq!(c.report(1.0).unwrap().malformed, 2);
    }
}
