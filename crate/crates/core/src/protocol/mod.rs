//! Anonymous device ⇄ coordinator messages and their wire encoding.
//!
//! A record on the wire is `<len>:<payload>\n` where `<len>` is the decimal
//! byte length of `<payload>` and the payload is a `;`-separated list of
//! `key=value` fields. Floats are written in shortest round-trip form, so
//! `decode(encode(m)) == m` bit for bit. Unknown keys are skipped. No field
//! ever identifies a device.

mod channel;
mod transport;

pub use channel::{Channel, ChannelModel, ChannelStats, DelayDistribution, Delivery};
pub use transport::{InProcess, TcpLoopback, Transport, TransportError};

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::Direction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptOutEdge {
    /// SoC fell below the deadband.
    Low,
    /// SoC rose above the deadband.
    High,
    /// The device ended an open-ended opt-out and rejoined PEM.
    Rejoin,
}

/// A packet the device consumes on its own authority while opted out.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForcedPacket {
    pub direction: Direction,
    pub rated_power_kw: f64,
    pub packet_length_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PacketMessage {
    Request {
        direction: Direction,
        rated_power_kw: f64,
        packet_length_s: f64,
        nonce: u64,
        sent_at: f64,
    },
    Response {
        accept: bool,
        nonce: u64,
        sent_at: f64,
    },
    OptOutNotice {
        edge: OptOutEdge,
        /// Packet the device starts on its own, if any.
        forced: Option<ForcedPacket>,
        /// Fresh nonce naming the forced packet.
        nonce: u64,
        /// Nonce of an accepted packet this opt-out cut short.
        cancels: Option<u64>,
        sent_at: f64,
    },
    DemandMeasurement {
        measured_demand_kw: f64,
        sent_at: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageKind {
    Request,
    Response,
    OptOutNotice,
    DemandMeasurement,
}

impl MessageKind {
    fn tag(self) -> &'static str {
        match self {
            MessageKind::Request => "REQUEST",
            MessageKind::Response => "RESPONSE",
            MessageKind::OptOutNotice => "OPT_OUT_NOTICE",
            MessageKind::DemandMeasurement => "DEMAND_MEASUREMENT",
        }
    }
}

impl PacketMessage {
    pub fn kind(&self) -> MessageKind {
        match self {
            PacketMessage::Request { .. } => MessageKind::Request,
            PacketMessage::Response { .. } => MessageKind::Response,
            PacketMessage::OptOutNotice { .. } => MessageKind::OptOutNotice,
            PacketMessage::DemandMeasurement { .. } => MessageKind::DemandMeasurement,
        }
    }

    pub fn sent_at(&self) -> f64 {
        match *self {
            PacketMessage::Request { sent_at, .. }
            | PacketMessage::Response { sent_at, .. }
            | PacketMessage::OptOutNotice { sent_at, .. }
            | PacketMessage::DemandMeasurement { sent_at, .. } => sent_at,
        }
    }

    pub fn nonce(&self) -> Option<u64> {
        match *self {
            PacketMessage::Request { nonce, .. }
            | PacketMessage::Response { nonce, .. }
            | PacketMessage::OptOutNotice { nonce, .. } => Some(nonce),
            PacketMessage::DemandMeasurement { .. } => None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("record truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("malformed field `{field}`: {reason}")]
    Field { field: &'static str, reason: String },
    #[error("missing field `{0}`")]
    Missing(&'static str),
    #[error("trailing bytes after record")]
    Trailing,
}

fn fmt_f64(out: &mut String, key: &str, v: f64) {
    let _ = write!(out, "{key}={v:?};");
}

/// Serialise one message as a length-prefixed record.
pub fn encode(msg: &PacketMessage) -> Vec<u8> {
    let mut p = String::with_capacity(96);
    let _ = write!(p, "kind={};", msg.kind().tag());
    match msg {
        PacketMessage::Request {
            direction,
            rated_power_kw,
            packet_length_s,
            nonce,
            sent_at,
        } => {
            let _ = write!(p, "dir={};", direction.as_str());
            fmt_f64(&mut p, "power", *rated_power_kw);
            fmt_f64(&mut p, "plen", *packet_length_s);
            let _ = write!(p, "nonce={nonce};");
            fmt_f64(&mut p, "ts", *sent_at);
        }
        PacketMessage::Response {
            accept,
            nonce,
            sent_at,
        } => {
            let _ = write!(p, "accept={};nonce={nonce};", u8::from(*accept));
            fmt_f64(&mut p, "ts", *sent_at);
        }
        PacketMessage::OptOutNotice {
            edge,
            forced,
            nonce,
            cancels,
            sent_at,
        } => {
            let e = match edge {
                OptOutEdge::Low => "low",
                OptOutEdge::High => "high",
                OptOutEdge::Rejoin => "rejoin",
            };
            let _ = write!(p, "edge={e};");
            if let Some(f) = forced {
                let _ = write!(p, "dir={};", f.direction.as_str());
                fmt_f64(&mut p, "power", f.rated_power_kw);
                fmt_f64(&mut p, "plen", f.packet_length_s);
            }
            let _ = write!(p, "nonce={nonce};");
            if let Some(c) = cancels {
                let _ = write!(p, "cancels={c};");
            }
            fmt_f64(&mut p, "ts", *sent_at);
        }
        PacketMessage::DemandMeasurement {
            measured_demand_kw,
            sent_at,
        } => {
            fmt_f64(&mut p, "demand", *measured_demand_kw);
            fmt_f64(&mut p, "ts", *sent_at);
        }
    }
    p.pop(); // trailing ';'
    let mut out = format!("{}:", p.len()).into_bytes();
    out.extend_from_slice(p.as_bytes());
    out.push(b'\n');
    out
}

/// Decode exactly one record occupying all of `bytes`.
pub fn decode(bytes: &[u8]) -> Result<PacketMessage, DecodeError> {
    match decode_frame(bytes)? {
        Some((msg, used)) if used == bytes.len() => Ok(msg),
        Some(_) => Err(DecodeError::Trailing),
        None => Err(DecodeError::Truncated {
            needed: bytes.len() + 1,
            available: bytes.len(),
        }),
    }
}

/// Decode the record at the head of `bytes`. `Ok(None)` means the header or
/// body is incomplete; more input may complete it.
pub fn decode_frame(bytes: &[u8]) -> Result<Option<(PacketMessage, usize)>, DecodeError> {
    let Some(colon) = bytes.iter().take(12).position(|&b| b == b':') else {
        if bytes.len() >= 12 || bytes.iter().any(|b| !b.is_ascii_digit()) {
            return Err(field_err("length", "missing `:` after length prefix"));
        }
        return Ok(None);
    };
    let len: usize = std::str::from_utf8(&bytes[..colon])
        .ok()
        .filter(|s| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()))
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| field_err("length", "not a decimal length"))?;
    let end = colon + 1 + len;
    if bytes.len() < end + 1 {
        return Ok(None);
    }
    if bytes[end] != b'\n' {
        return Err(field_err(
            "length",
            "record terminator not found at declared length",
        ));
    }
    let payload = std::str::from_utf8(&bytes[colon + 1..end])
        .map_err(|_| field_err("payload", "not valid UTF-8"))?;
    Ok(Some((parse_payload(payload)?, end + 1)))
}

fn field_err(field: &'static str, reason: impl Into<String>) -> DecodeError {
    DecodeError::Field {
        field,
        reason: reason.into(),
    }
}

struct Fields<'a>(HashMap<&'a str, &'a str>);

impl<'a> Fields<'a> {
    fn raw(&self, key: &'static str) -> Result<&'a str, DecodeError> {
        self.0.get(key).copied().ok_or(DecodeError::Missing(key))
    }

    fn f64(&self, key: &'static str) -> Result<f64, DecodeError> {
        let v = self.raw(key)?;
        v.parse()
            .map_err(|_| field_err(key, format!("`{v}` is not a number")))
    }

    fn u64(&self, key: &'static str) -> Result<u64, DecodeError> {
        let v = self.raw(key)?;
        v.parse()
            .map_err(|_| field_err(key, format!("`{v}` is not an unsigned integer")))
    }

    fn opt_u64(&self, key: &'static str) -> Result<Option<u64>, DecodeError> {
        if self.0.contains_key(key) {
            self.u64(key).map(Some)
        } else {
            Ok(None)
        }
    }

    fn direction(&self) -> Result<Direction, DecodeError> {
        match self.raw("dir")? {
            "charge" => Ok(Direction::Charge),
            "discharge" => Ok(Direction::Discharge),
            v => Err(field_err("dir", format!("unknown direction `{v}`"))),
        }
    }
}

fn parse_payload(payload: &str) -> Result<PacketMessage, DecodeError> {
    let mut map = HashMap::new();
    for part in payload.split(';') {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| field_err("payload", format!("`{part}` is not key=value")))?;
        if map.insert(k, v).is_some() {
            return Err(field_err("payload", format!("duplicate key `{k}`")));
        }
    }
    let f = Fields(map);
    let sent_at = f.f64("ts")?;
    match f.raw("kind")? {
        "REQUEST" => Ok(PacketMessage::Request {
            direction: f.direction()?,
            rated_power_kw: f.f64("power")?,
            packet_length_s: f.f64("plen")?,
            nonce: f.u64("nonce")?,
            sent_at,
        }),
        "RESPONSE" => {
            let accept = match f.raw("accept")? {
                "1" => true,
                "0" => false,
                v => return Err(field_err("accept", format!("expected 0 or 1, got `{v}`"))),
            };
            Ok(PacketMessage::Response {
                accept,
                nonce: f.u64("nonce")?,
                sent_at,
            })
        }
        "OPT_OUT_NOTICE" => {
            let edge = match f.raw("edge")? {
                "low" => OptOutEdge::Low,
                "high" => OptOutEdge::High,
                "rejoin" => OptOutEdge::Rejoin,
                v => return Err(field_err("edge", format!("unknown edge `{v}`"))),
            };
            let forced = if f.0.contains_key("dir") {
                Some(ForcedPacket {
                    direction: f.direction()?,
                    rated_power_kw: f.f64("power")?,
                    packet_length_s: f.f64("plen")?,
                })
            } else {
                None
            };
            Ok(PacketMessage::OptOutNotice {
                edge,
                forced,
                nonce: f.u64("nonce")?,
                cancels: f.opt_u64("cancels")?,
                sent_at,
            })
        }
        "DEMAND_MEASUREMENT" => Ok(PacketMessage::DemandMeasurement {
            measured_demand_kw: f.f64("demand")?,
            sent_at,
        }),
        other => Err(field_err("kind", format!("unknown kind `{other}`"))),
    }
}
