use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream};

use thiserror::Error;

use super::{decode_frame, encode, DecodeError, PacketMessage};

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("socket error: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("peer closed the stream")]
    Closed,
}

/// Carries a message across the wire and hands back what the far end decoded.
///
/// Both implementations run the full encode/decode path so that virtual-time
/// and real-time runs exercise the same bytes.
pub trait Transport {
    fn carry(&mut self, msg: &PacketMessage) -> Result<PacketMessage, TransportError>;
}

/// In-process queue: encode into a buffer and decode it straight back.
#[derive(Debug, Default)]
pub struct InProcess {
    buf: Vec<u8>,
}

impl Transport for InProcess {
    fn carry(&mut self, msg: &PacketMessage) -> Result<PacketMessage, TransportError> {
        self.buf.extend(encode(msg));
        let (out, used) = decode_frame(&self.buf)?.ok_or(TransportError::Closed)?;
        self.buf.drain(..used);
        Ok(out)
    }
}

/// A real loopback TCP stream. Frames written on one end are read and
/// decoded from the other.
#[derive(Debug)]
pub struct TcpLoopback {
    tx: TcpStream,
    rx: TcpStream,
    pending: Vec<u8>,
    bytes_carried: u64,
}

impl TcpLoopback {
    pub fn open() -> Result<Self, TransportError> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let tx = TcpStream::connect(listener.local_addr()?)?;
        let (rx, _) = listener.accept()?;
        tx.set_nodelay(true)?;
        Ok(Self {
            tx,
            rx,
            pending: Vec::new(),
            bytes_carried: 0,
        })
    }

    pub fn bytes_carried(&self) -> u64 {
        self.bytes_carried
    }
}

impl Transport for TcpLoopback {
    fn carry(&mut self, msg: &PacketMessage) -> Result<PacketMessage, TransportError> {
        let frame = encode(msg);
        self.tx.write_all(&frame)?;
        self.bytes_carried += frame.len() as u64;
        let mut chunk = [0u8; 512];
        loop {
            if let Some((out, used)) = decode_frame(&self.pending)? {
                self.pending.drain(..used);
                return Ok(out);
            }
            let n = self.rx.read(&mut chunk)?;
            if n == 0 {
                return Err(TransportError::Closed);
            }
            self.pending.extend_from_slice(&chunk[..n]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::Direction;

    fn sample() -> Vec<PacketMessage> {
        vec![
            PacketMessage::Request {
                direction: Direction::Charge,
                rated_power_kw: 4.5,
                packet_length_s: 300.0,
                nonce: 17,
                sent_at: 1.0,
            },
            PacketMessage::Response {
                accept: true,
                nonce: 17,
                sent_at: 1.002,
            },
            PacketMessage::DemandMeasurement {
                measured_demand_kw: 2351.5,
                sent_at: 2.0,
            },
        ]
    }

    #[test]
    fn in_process_carries_unchanged() {
        let mut t = InProcess::default();
        for m in sample() {
            assert_eq!(t.carry(&m).unwrap(), m);
        }
    }

    #[test]
    fn tcp_loopback_carries_unchanged() {
        let mut t = TcpLoopback::open().unwrap();
        for _ in 0..50 {
            for m in sample() {
                assert_eq!(t.carry(&m).unwrap(), m);
            }
        }
        assert!(t.bytes_carried() > 0);
    }
}
