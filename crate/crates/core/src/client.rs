//! Host-side interception facade.
//!
//! Applications call [`Dispatcher::load_model`] and [`Dispatcher::forward`];
//! whether the work runs on a local backend or is forwarded to a destination
//! node is decided by [`DispatchConfig`], never by the calling code.

use std::io;
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::debug;

use crate::backend::{Accelerator, BackendError, BackendProfile, Frame, Heatmap, ModelHandle};
use crate::config::{DispatchConfig, DispatchMode};
use crate::transport::{emulate_link, LinkProfile, TcpTransport, Transport};
use crate::wire::{
    self, output_elems, Digest, ErrorCode, Message, ModelDescriptor, ReadError, PROTOCOL_VERSION,
};

/// Wall-clock decomposition of one execution cycle.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CycleTiming {
    pub communication_s: f64,
    pub gpu_s: f64,
    pub other_s: f64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

impl CycleTiming {
    pub fn total_s(&self) -> f64 {
        self.communication_s + self.gpu_s + self.other_s
    }
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("connect failed: {0}")]
    ConnectFailed(io::Error),
    #[error("protocol version mismatch: we speak {ours}, server speaks {theirs}")]
    VersionMismatch { ours: u32, theirs: u32 },
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("session disconnected")]
    Disconnected,
    #[error("timed out waiting for the destination")]
    Timeout,
    #[error("remote error {code}: {message}")]
    Remote { code: u32, message: String },
    #[error("a cycle is already in flight on this session")]
    CycleInFlight,
    #[error("no cycle in flight")]
    NoCycleInFlight,
    #[error("no model loaded")]
    NoModel,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Encode(#[from] wire::EncodeError),
}

impl ClientError {
    pub fn remote_code(&self) -> Option<ErrorCode> {
        match self {
            ClientError::Remote { code, .. } => ErrorCode::from_u32(*code),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SessionOptions {
    pub connect_timeout: Duration,
    pub cycle_timeout: Duration,
    pub version: u32,
    pub link: LinkProfile,
}

impl Default for SessionOptions {
    fn default() -> Self {
        SessionOptions {
            connect_timeout: Duration::from_secs(5),
            cycle_timeout: Duration::from_secs(60),
            version: PROTOCOL_VERSION,
            link: LinkProfile::ideal(),
        }
    }
}

impl From<&DispatchConfig> for SessionOptions {
    fn from(cfg: &DispatchConfig) -> Self {
        SessionOptions {
            connect_timeout: cfg.connect_timeout,
            cycle_timeout: cfg.cycle_timeout,
            version: PROTOCOL_VERSION,
            link: cfg.link.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CacheOutcome {
    /// The destination already held the model.
    CacheHit,
    /// The model had to be sent.
    Uploaded,
    /// Registered on a local backend; nothing crossed the network.
    Local,
}

/// Result of making a model resident, with the bytes it cost on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSync {
    pub outcome: CacheOutcome,
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum State {
    Connected,
    ModelReady { digest: Digest, c: f64 },
    Closed,
}

struct PendingCycle {
    started: Instant,
    expected_elems: u64,
    bytes_sent: u64,
    send_s: f64,
}

/// One connection to a destination node. Single-owner: it may move between
/// threads but carries at most one execution cycle at a time.
pub struct Session {
    transport: Box<dyn Transport>,
    state: State,
    version: u32,
    cycle_timeout: Duration,
    pending: Option<PendingCycle>,
    scratch: Vec<u8>,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("state", &self.state)
            .field("version", &self.version)
            .field("in_flight", &self.pending.is_some())
            .finish()
    }
}

/// Opens a TCP session and performs the Hello exchange.
pub fn connect(endpoint: &str, opts: &SessionOptions) -> Result<Session, ClientError> {
    let addrs = endpoint
        .to_socket_addrs()
        .map_err(ClientError::ConnectFailed)?;
    let mut last = io::Error::new(io::ErrorKind::NotFound, "endpoint resolved to no address");
    for addr in addrs {
        match TcpStream::connect_timeout(&addr, opts.connect_timeout) {
            Ok(stream) => {
                let tcp = TcpTransport::new(stream).map_err(ClientError::ConnectFailed)?;
                let transport: Box<dyn Transport> = if opts.link.is_ideal() {
                    Box::new(tcp)
                } else {
                    Box::new(emulate_link(tcp, opts.link.clone()))
                };
                return Session::handshake(transport, opts);
            }
            Err(e) => last = e,
        }
    }
    Err(ClientError::ConnectFailed(last))
}

impl Session {
    /// Runs the Hello exchange over an already-open transport.
    pub fn handshake(
        mut transport: Box<dyn Transport>,
        opts: &SessionOptions,
    ) -> Result<Session, ClientError> {
        transport
            .set_recv_timeout(Some(opts.connect_timeout))
            .map_err(ClientError::ConnectFailed)?;
        let hello = wire::encode(&Message::Hello {
            version: opts.version,
        })?;
        if transport.send_burst(&hello).is_err() {
            transport.close();
            return Err(ClientError::Disconnected);
        }
        let reply = transport.recv();
        let result = match reply {
            Ok((Message::HelloAck { version }, _)) if version == opts.version => Ok(()),
            Ok((Message::HelloAck { version }, _)) => Err(ClientError::VersionMismatch {
                ours: opts.version,
                theirs: version,
            }),
            Ok((Message::Error { code, message }, _)) => Err(ClientError::Remote { code, message }),
            Ok((other, _)) => Err(ClientError::ProtocolViolation(format!(
                "expected HelloAck, got {:?}",
                other.tag()
            ))),
            Err(e) => Err(read_error(e)),
        };
        if let Err(e) = result {
            transport.close();
            return Err(e);
        }
        transport
            .set_recv_timeout(Some(opts.cycle_timeout))
            .map_err(ClientError::ConnectFailed)?;
        Ok(Session {
            transport,
            state: State::Connected,
            version: opts.version,
            cycle_timeout: opts.cycle_timeout,
            pending: None,
            scratch: Vec::new(),
        })
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn is_closed(&self) -> bool {
        self.state == State::Closed
    }

    pub fn model_ready(&self) -> Option<Digest> {
        match self.state {
            State::ModelReady { digest, .. } => Some(digest),
            _ => None,
        }
    }

    pub fn cycle_timeout(&self) -> Duration {
        self.cycle_timeout
    }

    fn fail(&mut self, err: ClientError) -> ClientError {
        self.close();
        err
    }

    fn recv(&mut self) -> Result<(Message, usize), ClientError> {
        match self.transport.recv() {
            Ok((Message::Error { code, message }, _)) => {
                Err(self.fail(ClientError::Remote { code, message }))
            }
            Ok(ok) => Ok(ok),
            Err(e) => {
                let err = read_error(e);
                Err(self.fail(err))
            }
        }
    }

    fn send(&mut self, bytes: &[u8]) -> Result<(), ClientError> {
        self.transport
            .send_burst(bytes)
            .map_err(|_| self.fail(ClientError::Disconnected))
    }

    fn usable(&self) -> Result<(), ClientError> {
        if self.state == State::Closed {
            return Err(ClientError::Disconnected);
        }
        if self.pending.is_some() {
            return Err(ClientError::CycleInFlight);
        }
        Ok(())
    }

    /// Makes `descriptor` the session's model, uploading it only if the
    /// destination does not already hold its digest.
    pub fn ensure_model(&mut self, descriptor: &ModelDescriptor) -> Result<ModelSync, ClientError> {
        self.usable()?;
        let digest = descriptor.digest();
        let check = wire::encode(&Message::ModelCheck { digest })?;
        self.send(&check)?;
        let mut sent = check.len() as u64;
        let (reply, n) = self.recv()?;
        let mut received = n as u64;
        let outcome = match reply {
            Message::ModelAck { digest: d } if d == digest => CacheOutcome::CacheHit,
            Message::ModelNeeded { digest: d } if d == digest => {
                let upload = wire::encode(&Message::ModelUpload(descriptor.to_upload()))?;
                self.send(&upload)?;
                sent += upload.len() as u64;
                let (ack, n) = self.recv()?;
                received += n as u64;
                match ack {
                    Message::ModelAck { digest: d } if d == digest => CacheOutcome::Uploaded,
                    other => {
                        return Err(self.fail(ClientError::ProtocolViolation(format!(
                            "expected ModelAck, got {:?}",
                            other.tag()
                        ))))
                    }
                }
            }
            other => {
                return Err(self.fail(ClientError::ProtocolViolation(format!(
                    "expected ModelAck or ModelNeeded for {digest}, got {:?}",
                    other.tag()
                ))))
            }
        };
        debug!(%digest, ?outcome, sent, "model ready");
        self.state = State::ModelReady {
            digest,
            c: descriptor.c(),
        };
        Ok(ModelSync {
            outcome,
            bytes_sent: sent,
            bytes_received: received,
        })
    }

    /// Sends FrameData, Resolution and FrameSize, in that order, as one burst.
    pub fn begin_cycle(&mut self, frame: &Frame) -> Result<(), ClientError> {
        self.usable()?;
        let State::ModelReady { c, .. } = self.state else {
            return Err(ClientError::NoModel);
        };
        let started = Instant::now();
        let dims = frame.dims();
        let mut buf = std::mem::take(&mut self.scratch);
        buf.clear();
        let encoded = wire::encode_frame_data(frame.data(), &mut buf)
            .and_then(|_| {
                wire::encode_into(
                    &Message::Resolution {
                        w: dims.width(),
                        h: dims.height(),
                    },
                    &mut buf,
                )
            })
            .and_then(|_| {
                wire::encode_into(
                    &Message::FrameSize {
                        elem_count: dims.elem_count() as u32,
                    },
                    &mut buf,
                )
            });
        if let Err(e) = encoded {
            self.scratch = buf;
            return Err(e.into());
        }
        let send_start = Instant::now();
        let sent = self.send(&buf);
        let send_s = send_start.elapsed().as_secs_f64();
        let bytes_sent = buf.len() as u64;
        self.scratch = buf;
        sent?;
        self.pending = Some(PendingCycle {
            started,
            expected_elems: output_elems(dims.elem_count(), c),
            bytes_sent,
            send_s,
        });
        Ok(())
    }

    /// Waits for the ForwardResult of the cycle started by [`begin_cycle`].
    ///
    /// [`begin_cycle`]: Session::begin_cycle
    pub fn finish_cycle(&mut self) -> Result<(Heatmap, CycleTiming), ClientError> {
        if self.state == State::Closed {
            return Err(ClientError::Disconnected);
        }
        let pending = self.pending.take().ok_or(ClientError::NoCycleInFlight)?;
        let recv_start = Instant::now();
        let (msg, n) = self.recv()?;
        let recv_s = recv_start.elapsed().as_secs_f64();
        let Message::ForwardResult { compute_s, data } = msg else {
            return Err(self.fail(ClientError::ProtocolViolation(format!(
                "expected ForwardResult, got {:?}",
                msg.tag()
            ))));
        };
        if data.len() as u64 != pending.expected_elems {
            return Err(self.fail(ClientError::ProtocolViolation(format!(
                "ForwardResult carries {} elements, expected {}",
                data.len(),
                pending.expected_elems
            ))));
        }
        let wall = pending.started.elapsed().as_secs_f64();
        let gpu_s = compute_s.min(recv_s);
        let communication_s = pending.send_s + recv_s - gpu_s;
        let timing = CycleTiming {
            communication_s,
            gpu_s,
            other_s: (wall - communication_s - gpu_s).max(0.0),
            bytes_sent: pending.bytes_sent,
            bytes_received: n as u64,
        };
        Ok((Heatmap { data }, timing))
    }

    /// One full execution cycle.
    pub fn remote_forward(&mut self, frame: &Frame) -> Result<(Heatmap, CycleTiming), ClientError> {
        self.begin_cycle(frame)?;
        self.finish_cycle()
    }

    /// Closes the session. Any cycle in flight is abandoned. Idempotent.
    pub fn close(&mut self) {
        if self.state != State::Closed {
            self.transport.close();
            self.state = State::Closed;
        }
        self.pending = None;
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        self.close();
    }
}

fn read_error(e: ReadError) -> ClientError {
    match e {
        ReadError::Closed => ClientError::Disconnected,
        ReadError::TimedOut => ClientError::Timeout,
        ReadError::Decode(d) => ClientError::ProtocolViolation(d.to_string()),
        ReadError::TooLarge(n, _) => ClientError::ProtocolViolation(format!("{n}-byte frame")),
        ReadError::Io(e) if wire::is_disconnect(&e) => ClientError::Disconnected,
        ReadError::Io(e) => ClientError::ConnectFailed(e),
    }
}

enum Route {
    Local {
        accelerator: Arc<Accelerator>,
        model: Option<ModelHandle>,
    },
    Remote(Session),
}

/// The interception facade: same calls, local or forwarded execution.
pub struct Dispatcher {
    route: Route,
}

impl std::fmt::Debug for Dispatcher {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Dispatcher")
            .field("mode", &self.mode())
            .finish()
    }
}

impl Dispatcher {
    pub fn local(accelerator: Arc<Accelerator>) -> Dispatcher {
        Dispatcher {
            route: Route::Local {
                accelerator,
                model: None,
            },
        }
    }

    pub fn remote(session: Session) -> Dispatcher {
        Dispatcher {
            route: Route::Remote(session),
        }
    }

    /// Builds the route the configuration asks for: an emulated local
    /// accelerator (preset scaled by `scale_factor`) or a remote session.
    pub fn from_config(cfg: &DispatchConfig) -> Result<Dispatcher, ClientError> {
        match cfg.mode {
            DispatchMode::Local => {
                let profile = cfg
                    .preset
                    .map(|p| BackendProfile::preset(p, cfg.kind).scaled(cfg.scale_factor))
                    .unwrap_or_else(BackendProfile::none);
                Ok(Dispatcher::local(Arc::new(Accelerator::emulated(profile))))
            }
            DispatchMode::Remote => {
                let endpoint = cfg.endpoint.as_deref().ok_or_else(|| {
                    ClientError::ConnectFailed(io::Error::new(
                        io::ErrorKind::InvalidInput,
                        "remote mode needs an endpoint",
                    ))
                })?;
                Ok(Dispatcher::remote(connect(endpoint, &cfg.into())?))
            }
        }
    }

    pub fn mode(&self) -> DispatchMode {
        match self.route {
            Route::Local { .. } => DispatchMode::Local,
            Route::Remote(_) => DispatchMode::Remote,
        }
    }

    pub fn session(&self) -> Option<&Session> {
        match &self.route {
            Route::Remote(s) => Some(s),
            Route::Local { .. } => None,
        }
    }

    pub fn load_model(&mut self, descriptor: &ModelDescriptor) -> Result<ModelSync, ClientError> {
        match &mut self.route {
            Route::Local { accelerator, model } => {
                *model = Some(accelerator.register_model(0, descriptor)?);
                Ok(ModelSync {
                    outcome: CacheOutcome::Local,
                    bytes_sent: 0,
                    bytes_received: 0,
                })
            }
            Route::Remote(session) => session.ensure_model(descriptor),
        }
    }

    /// Runs one forward pass wherever the configuration routes it.
    pub fn forward(&mut self, frame: &Frame) -> Result<(Heatmap, CycleTiming), ClientError> {
        match &mut self.route {
            Route::Local { accelerator, model } => {
                let handle = model.ok_or(ClientError::NoModel)?;
                let start = Instant::now();
                let (heatmap, gpu_s) = accelerator.forward(0, handle, frame)?;
                let wall = start.elapsed().as_secs_f64();
                Ok((
                    heatmap,
                    CycleTiming {
                        communication_s: 0.0,
                        gpu_s,
                        other_s: (wall - gpu_s).max(0.0),
                        bytes_sent: 0,
                        bytes_received: 0,
                    },
                ))
            }
            Route::Remote(session) => session.remote_forward(frame),
        }
    }

    pub fn close(&mut self) {
        if let Route::Remote(s) = &mut self.route {
            s.close();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::Dims;

    #[test]
    fn timing_total() {
        let t = CycleTiming {
            communication_s: 0.5,
            gpu_s: 1.0,
            other_s: 0.25,
            ..Default::default()
        };
        assert_eq!(t.total_s(), 1.75);
    }

    #[test]
    fn local_dispatch_has_no_network_cost() {
        let mut d = Dispatcher::local(Arc::new(Accelerator::emulated(BackendProfile::none())));
        let frame = Frame::new(Dims::image(1, 2, 4).unwrap(), vec![2.0; 8]).unwrap();
        assert!(matches!(d.forward(&frame), Err(ClientError::NoModel)));
        let sync = d
            .load_model(&ModelDescriptor::new("m", b"s".to_vec(), vec![], 2.0))
            .unwrap();
        assert_eq!(sync.outcome, CacheOutcome::Local);
        let (out, timing) = d.forward(&frame).unwrap();
        assert_eq!(out.data, vec![2.0; 4]);
        assert_eq!(timing.communication_s, 0.0);
        assert_eq!(timing.bytes_sent + timing.bytes_received, 0);
        assert_eq!(d.mode(), DispatchMode::Local);
    }

    #[test]
    fn unreachable_endpoint_fails_fast() {
        // reserve a port, then free it so nothing listens there
        let port = {
            let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
            l.local_addr().unwrap().port()
        };
        let opts = SessionOptions {
            connect_timeout: Duration::from_millis(500),
            ..Default::default()
        };
        let start = Instant::now();
        let err = connect(&format!("127.0.0.1:{port}"), &opts).unwrap_err();
        assert!(matches!(err, ClientError::ConnectFailed(_)));
        assert!(start.elapsed() < Duration::from_secs(2));
    }
}
