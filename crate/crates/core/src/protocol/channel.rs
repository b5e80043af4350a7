use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use super::{MessageKind, PacketMessage};

/// Family and parameters of a delay distribution, in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum DelayDistribution {
    #[default]
    Zero,
    Constant {
        seconds: f64,
    },
    Normal {
        mean_s: f64,
        sd_s: f64,
    },
    Exponential {
        mean_s: f64,
    },
    Uniform {
        min_s: f64,
        max_s: f64,
    },
    /// Resample uniformly from recorded delays.
    Empirical {
        samples_s: Vec<f64>,
    },
}

impl DelayDistribution {
    /// Raw sample; may be negative for the normal family.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            DelayDistribution::Zero => 0.0,
            DelayDistribution::Constant { seconds } => *seconds,
            DelayDistribution::Normal { mean_s, sd_s } => Normal::new(*mean_s, sd_s.max(0.0))
                .map(|d| d.sample(rng))
                .unwrap_or(*mean_s),
            DelayDistribution::Exponential { mean_s } => {
                if *mean_s > 0.0 {
                    Exp::new(1.0 / mean_s).map(|d| d.sample(rng)).unwrap_or(0.0)
                } else {
                    0.0
                }
            }
            DelayDistribution::Uniform { min_s, max_s } => {
                if max_s > min_s {
                    rng.random_range(*min_s..*max_s)
                } else {
                    *min_s
                }
            }
            DelayDistribution::Empirical { samples_s } => {
                if samples_s.is_empty() {
                    0.0
                } else {
                    samples_s[rng.random_range(0..samples_s.len())]
                }
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            DelayDistribution::Zero => 0.0,
            DelayDistribution::Constant { seconds } => *seconds,
            DelayDistribution::Normal { mean_s, .. }
            | DelayDistribution::Exponential { mean_s } => *mean_s,
            DelayDistribution::Uniform { min_s, max_s } => 0.5 * (min_s + max_s),
            DelayDistribution::Empirical { samples_s } => {
                if samples_s.is_empty() {
                    0.0
                } else {
                    samples_s.iter().sum::<f64>() / samples_s.len() as f64
                }
            }
        }
    }

    fn is_valid(&self) -> bool {
        match self {
            DelayDistribution::Zero => true,
            DelayDistribution::Constant { seconds } => seconds.is_finite(),
            DelayDistribution::Normal { mean_s, sd_s } => mean_s.is_finite() && *sd_s >= 0.0,
            DelayDistribution::Exponential { mean_s } => *mean_s >= 0.0,
            DelayDistribution::Uniform { min_s, max_s } => min_s <= max_s,
            DelayDistribution::Empirical { samples_s } => samples_s.iter().all(|s| s.is_finite()),
        }
    }
}

/// Latency, loss and measurement-delay characteristics of one logical link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ChannelModel {
    pub base_latency: DelayDistribution,
    pub loss_probability: f64,
    pub measurement_delay_probability: f64,
    pub measurement_delay: DelayDistribution,
    /// Extra delay between an authorisation and the device acting on it.
    pub input_delay: DelayDistribution,
    /// Deliver meter readings in send order, so a delayed reading holds back
    /// the ones behind it.
    pub in_order_measurements: bool,
}

impl ChannelModel {
    pub fn ideal() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in [
            ("loss_probability", self.loss_probability),
            (
                "measurement_delay_probability",
                self.measurement_delay_probability,
            ),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        for (name, d) in [
            ("base_latency", &self.base_latency),
            ("measurement_delay", &self.measurement_delay),
            ("input_delay", &self.input_delay),
        ] {
            if !d.is_valid() {
                return Err(format!("{name} has invalid parameters"));
            }
        }
        Ok(())
    }

    /// Mean one-way latency of device traffic.
    pub fn mean_one_way(&self) -> f64 {
        (self.base_latency.mean() + self.input_delay.mean()).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Delivery {
    Scheduled { msg: PacketMessage, deliver_at: f64 },
    Dropped,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChannelStats {
    pub sent: u64,
    pub dropped: u64,
    pub delayed_measurements: u64,
    /// Delay samples that came out negative and were clamped to zero.
    pub clamped: u64,
}

/// A seeded channel instance. One per logical link so that metering and
/// device traffic draw from independent streams.
#[derive(Debug, Clone)]
pub struct Channel {
    model: ChannelModel,
    rng: ChaCha8Rng,
    stats: ChannelStats,
    /// Latest delivery time of a meter reading so far.
    meter_release: f64,
}

impl Channel {
    pub fn new(model: ChannelModel, seed: u64) -> Self {
        Self {
            model,
            rng: ChaCha8Rng::seed_from_u64(seed),
            stats: ChannelStats::default(),
            meter_release: f64::NEG_INFINITY,
        }
    }

    pub fn model(&self) -> &ChannelModel {
        &self.model
    }

    pub fn stats(&self) -> ChannelStats {
        self.stats
    }

    fn clamp(stats: &mut ChannelStats, s: f64) -> f64 {
        if s < 0.0 {
            stats.clamped += 1;
            0.0
        } else {
            s
        }
    }

    /// Route `msg` sent at `now`: either drop it or return its delivery time.
    pub fn send(&mut self, msg: PacketMessage, now: f64) -> Delivery {
        debug_assert!(now >= 0.0);
        self.stats.sent += 1;
        let Self {
            model,
            rng,
            stats,
            meter_release,
        } = self;
        if model.loss_probability > 0.0 && rng.random::<f64>() < model.loss_probability {
            stats.dropped += 1;
            return Delivery::Dropped;
        }
        let delay = match msg.kind() {
            MessageKind::Request | MessageKind::Response => {
                let base = model.base_latency.sample(rng);
                let input = model.input_delay.sample(rng);
                Self::clamp(stats, base) + Self::clamp(stats, input)
            }
            MessageKind::OptOutNotice => Self::clamp(stats, model.base_latency.sample(rng)),
            MessageKind::DemandMeasurement => {
                let p = model.measurement_delay_probability;
                if p > 0.0 && rng.random::<f64>() < p {
                    stats.delayed_measurements += 1;
                    Self::clamp(stats, model.measurement_delay.sample(rng))
                } else {
                    0.0
                }
            }
        };
        let mut deliver_at = now + delay;
        if msg.kind() == MessageKind::DemandMeasurement && model.in_order_measurements {
            deliver_at = deliver_at.max(*meter_release);
            *meter_release = deliver_at;
        }
        Delivery::Scheduled { msg, deliver_at }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::Direction;

    fn req(ts: f64) -> PacketMessage {
        PacketMessage::Request {
            direction: Direction::Charge,
            rated_power_kw: 4.5,
            packet_length_s: 300.0,
            nonce: 1,
            sent_at: ts,
        }
    }

    #[test]
    fn total_loss_drops_everything() {
        let mut ch = Channel::new(
            ChannelModel {
                loss_probability: 1.0,
                ..ChannelModel::ideal()
            },
            1,
        );
        for i in 0..1000 {
            assert_eq!(ch.send(req(i as f64), i as f64), Delivery::Dropped);
        }
        assert_eq!(ch.stats().dropped, 1000);
    }

    #[test]
    fn ideal_channel_is_identity() {
        let mut ch = Channel::new(ChannelModel::ideal(), 1);
        let m = req(5.0);
        assert_eq!(
            ch.send(m.clone(), 5.0),
            Delivery::Scheduled {
                msg: m,
                deliver_at: 5.0
            }
        );
    }

    #[test]
    fn gated_measurement_delay_statistics() {
        let model = ChannelModel {
            measurement_delay_probability: 0.1,
            measurement_delay: DelayDistribution::Normal {
                mean_s: 20.0,
                sd_s: 2.0,
            },
            ..ChannelModel::ideal()
        };
        let mut ch = Channel::new(model, 99);
        let mut delays = Vec::new();
        for i in 0..100_000 {
            let now = i as f64;
            let m = PacketMessage::DemandMeasurement {
                measured_demand_kw: 1.0,
                sent_at: now,
            };
            if let Delivery::Scheduled { deliver_at, .. } = ch.send(m, now) {
                if deliver_at > now {
                    delays.push(deliver_at - now);
                }
            }
        }
        // Binomial(1e5, 0.1): σ ≈ 95.
        assert!(
            (delays.len() as f64 - 10_000.0).abs() < 400.0,
            "{}",
            delays.len()
        );
        let mean = delays.iter().sum::<f64>() / delays.len() as f64;
        assert!((19.8..=20.2).contains(&mean), "mean = {mean}");
        assert_eq!(ch.stats().delayed_measurements as usize, delays.len());
    }

    #[test]
    fn in_order_readings_queue_behind_a_delayed_one() {
        let model = ChannelModel {
            measurement_delay_probability: 1.0,
            measurement_delay: DelayDistribution::Constant { seconds: 20.0 },
            in_order_measurements: true,
            ..ChannelModel::ideal()
        };
        let mut ch = Channel::new(model, 3);
        let meter = |t: f64| PacketMessage::DemandMeasurement {
            measured_demand_kw: t,
            sent_at: t,
        };
        let Delivery::Scheduled {
            deliver_at: first, ..
        } = ch.send(meter(0.0), 0.0)
        else {
            panic!()
        };
        assert_eq!(first, 20.0);
        ch.model.measurement_delay_probability = 0.0;
        for t in 1..5 {
            let Delivery::Scheduled { deliver_at, .. } = ch.send(meter(t as f64), t as f64) else {
                panic!()
            };
            assert_eq!(deliver_at, 20.0);
        }
        let Delivery::Scheduled { deliver_at, .. } = ch.send(meter(30.0), 30.0) else {
            panic!()
        };
        assert_eq!(deliver_at, 30.0);
    }

    #[test]
    fn negative_samples_are_clamped_and_counted() {
        let model = ChannelModel {
            base_latency: DelayDistribution::Normal {
                mean_s: 0.0,
                sd_s: 1.0,
            },
            ..ChannelModel::ideal()
        };
        let mut ch = Channel::new(model, 3);
        for i in 0..10_000 {
            match ch.send(req(0.0), 10.0) {
                Delivery::Scheduled { deliver_at, .. } => assert!(deliver_at >= 10.0, "{i}"),
                Delivery::Dropped => unreachable!(),
            }
        }
        assert!((4_500..5_500).contains(&ch.stats().clamped));
    }

    #[test]
    fn validate_rejects_bad_probability() {
        let m = ChannelModel {
            loss_probability: 1.5,
            ..ChannelModel::ideal()
        };
        assert!(m.validate().is_err());
        assert!(ChannelModel::ideal().validate().is_ok());
    }
}
