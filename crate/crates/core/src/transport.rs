//! Message transports used by client sessions, plus link emulation.

use std::io::{self, Write};
use std::net::{Shutdown, TcpStream};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::clock;
use crate::wire::{FrameReader, Message, ReadError};

/// A bidirectional, ordered message channel.
pub trait Transport: Send {
    /// Sends pre-encoded frames as one back-to-back burst.
    fn send_burst(&mut self, frames: &[u8]) -> io::Result<()>;

    /// Blocks for the next message; returns it with its encoded size.
    fn recv(&mut self) -> Result<(Message, usize), ReadError>;

    fn set_recv_timeout(&mut self, timeout: Option<Duration>) -> io::Result<()>;

    fn close(&mut self);
}

pub struct TcpTransport {
    stream: TcpStream,
    reader: FrameReader,
}

impl TcpTransport {
    pub fn new(stream: TcpStream) -> io::Result<TcpTransport> {
        stream.set_nodelay(true)?;
        Ok(TcpTransport {
            stream,
            reader: FrameReader::default(),
        })
    }
}

impl Transport for TcpTransport {
    fn send_burst(&mut self, frames: &[u8]) -> io::Result<()> {
        self.stream.write_all(frames)?;
        self.stream.flush()
    }

    fn recv(&mut self) -> Result<(Message, usize), ReadError> {
        self.reader.read_message(&mut self.stream)
    }

    fn set_recv_timeout(&mut self, timeout: Option<Duration>) -> io::Result<()> {
        self.stream.set_read_timeout(timeout)
    }

    fn close(&mut self) {
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn send_burst(&mut self, frames: &[u8]) -> io::Result<()> {
        (**self).send_burst(frames)
    }

    fn recv(&mut self) -> Result<(Message, usize), ReadError> {
        (**self).recv()
    }

    fn set_recv_timeout(&mut self, timeout: Option<Duration>) -> io::Result<()> {
        (**self).set_recv_timeout(timeout)
    }

    fn close(&mut self) {
        (**self).close()
    }
}

/// Emulated network conditions between host and destination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkProfile {
    pub one_way_delay_s: f64,
    /// `None` means unlimited.
    pub bandwidth_bytes_per_s: Option<f64>,
    pub label: String,
}

impl LinkProfile {
    pub fn new(
        label: impl Into<String>,
        one_way_delay_s: f64,
        bandwidth_bytes_per_s: Option<f64>,
    ) -> Result<LinkProfile, String> {
        if !(one_way_delay_s.is_finite() && one_way_delay_s >= 0.0) {
            return Err(format!("one-way delay must be >= 0, got {one_way_delay_s}"));
        }
        if let Some(bw) = bandwidth_bytes_per_s {
            if bw.is_nan() || bw <= 0.0 {
                return Err(format!("bandwidth must be > 0, got {bw}"));
            }
        }
        Ok(LinkProfile {
            one_way_delay_s,
            bandwidth_bytes_per_s,
            label: label.into(),
        })
    }

    /// Zero delay, unlimited bandwidth.
    pub fn ideal() -> LinkProfile {
        LinkProfile {
            one_way_delay_s: 0.0,
            bandwidth_bytes_per_s: None,
            label: "ideal".into(),
        }
    }

    pub fn is_ideal(&self) -> bool {
        self.one_way_delay_s == 0.0 && self.bandwidth_bytes_per_s.is_none()
    }

    /// Delivery time for one store-and-forward hop of `bytes`.
    pub fn delivery_delay(&self, bytes: usize) -> Duration {
        let serialise = match self.bandwidth_bytes_per_s {
            Some(bw) => bytes as f64 / bw,
            None => 0.0,
        };
        clock::secs(self.one_way_delay_s + serialise)
    }
}

/// Transport wrapper that delays every delivery according to a [`LinkProfile`].
///
/// A burst of back-to-back frames pays the one-way delay once plus its total
/// size over the bandwidth; each received message pays the same on arrival.
/// Ordering is preserved because delays are applied inline.
pub struct EmulatedLink<T> {
    inner: T,
    link: LinkProfile,
}

pub fn emulate_link<T: Transport>(inner: T, link: LinkProfile) -> EmulatedLink<T> {
    EmulatedLink { inner, link }
}

impl<T> EmulatedLink<T> {
    pub fn link(&self) -> &LinkProfile {
        &self.link
    }
}

impl<T: Transport> Transport for EmulatedLink<T> {
    fn send_burst(&mut self, frames: &[u8]) -> io::Result<()> {
        clock::sleep_for(self.link.delivery_delay(frames.len()));
        self.inner.send_burst(frames)
    }

    fn recv(&mut self) -> Result<(Message, usize), ReadError> {
        let (msg, n) = self.inner.recv()?;
        clock::sleep_for(self.link.delivery_delay(n));
        Ok((msg, n))
    }

    fn set_recv_timeout(&mut self, timeout: Option<Duration>) -> io::Result<()> {
        self.inner.set_recv_timeout(timeout)
    }

    fn close(&mut self) {
        self.inner.close()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delivery_delay_arithmetic() {
        let link = LinkProfile::new("l", 0.0, Some(100e6)).unwrap();
        let d = link.delivery_delay(3_756_924);
        assert!((d.as_secs_f64() - 0.03756924).abs() < 1e-9);
        let link = LinkProfile::new("l", 0.01, None).unwrap();
        assert_eq!(link.delivery_delay(1 << 20), Duration::from_millis(10));
        assert_eq!(LinkProfile::ideal().delivery_delay(1 << 30), Duration::ZERO);
    }

    #[test]
    fn rejects_bad_profiles() {
        assert!(LinkProfile::new("l", -1.0, None).is_err());
        assert!(LinkProfile::new("l", 0.0, Some(0.0)).is_err());
        assert!(LinkProfile::new("l", 0.0, Some(f64::NAN)).is_err());
    }
}
