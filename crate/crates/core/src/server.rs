//! Destination-node service.
//!
//! Each accepted connection gets its own thread running a [`SessionState`]
//! machine. Every backend call funnels through one shared [`Accelerator`], so
//! forwards from concurrent sessions execute one at a time in arrival order.

use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use thiserror::Error;
use tracing::{debug, info, warn};

use crate::backend::{Accelerator, BackendError, ExecEntry, Frame, ModelHandle};
use crate::wire::{
    self, Digest, Dims, ErrorCode, FrameReader, Message, ModelDescriptor, ReadError, Tag,
    MAX_FRAME_LEN, PROTOCOL_VERSION,
};

#[derive(Debug, Clone, PartialEq)]
pub struct ServerConfig {
    pub max_sessions: usize,
    /// Upper bound on structure plus weights bytes of one uploaded model.
    pub max_model_bytes: u64,
    pub protocol_version: u32,
    /// How long a cycle already in progress may run on after shutdown starts.
    pub cycle_timeout: Duration,
    pub poll_interval: Duration,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            max_sessions: 16,
            max_model_bytes: 1 << 30,
            protocol_version: PROTOCOL_VERSION,
            cycle_timeout: Duration::from_secs(60),
            poll_interval: Duration::from_millis(20),
        }
    }
}

impl ServerConfig {
    pub fn with_limits(max_sessions: usize, max_model_bytes: u64) -> ServerConfig {
        ServerConfig {
            max_sessions,
            max_model_bytes,
            ..ServerConfig::default()
        }
    }
}

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("failed to bind: {0}")]
    BindFailed(io::Error),
}

/// Models uploaded to this server, shared by all sessions and kept until the
/// process exits.
#[derive(Debug, Default)]
pub struct ModelStore {
    inner: RwLock<StoreInner>,
}

#[derive(Debug, Default)]
struct StoreInner {
    index: HashMap<Digest, usize>,
    entries: Vec<(ModelDescriptor, ModelHandle)>,
}

impl ModelStore {
    pub fn lookup(&self, digest: &Digest) -> Option<(ModelHandle, f64)> {
        let inner = self.inner.read().unwrap();
        inner
            .index
            .get(digest)
            .map(|&i| (inner.entries[i].1, inner.entries[i].0.c()))
    }

    pub fn descriptor(&self, digest: &Digest) -> Option<ModelDescriptor> {
        let inner = self.inner.read().unwrap();
        inner.index.get(digest).map(|&i| inner.entries[i].0.clone())
    }

    fn insert(&self, descriptor: ModelDescriptor, handle: ModelHandle) {
        let mut inner = self.inner.write().unwrap();
        if inner.index.contains_key(&descriptor.digest()) {
            return;
        }
        let i = inner.entries.len();
        inner.index.insert(descriptor.digest(), i);
        inner.entries.push((descriptor, handle));
    }

    /// Digests in insertion order.
    pub fn digests(&self) -> Vec<Digest> {
        let inner = self.inner.read().unwrap();
        inner.entries.iter().map(|(d, _)| d.digest()).collect()
    }

    pub fn len(&self) -> usize {
        self.inner.read().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Default)]
struct Counters {
    accepted: AtomicU64,
    rejected_busy: AtomicU64,
    active: AtomicUsize,
    uploads: AtomicU64,
    cache_hits: AtomicU64,
    forwards: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ServerStats {
    pub accepted: u64,
    pub rejected_busy: u64,
    pub active_sessions: usize,
    pub uploads: u64,
    pub cache_hits: u64,
    pub forwards: u64,
}

/// State shared by every session of one server.
#[derive(Debug)]
pub struct ServerContext {
    config: ServerConfig,
    accelerator: Arc<Accelerator>,
    store: ModelStore,
    counters: Counters,
}

impl ServerContext {
    pub fn new(accelerator: Arc<Accelerator>, config: ServerConfig) -> ServerContext {
        ServerContext {
            config,
            accelerator,
            store: ModelStore::default(),
            counters: Counters::default(),
        }
    }

    pub fn store(&self) -> &ModelStore {
        &self.store
    }

    pub fn accelerator(&self) -> &Arc<Accelerator> {
        &self.accelerator
    }

    pub fn stats(&self) -> ServerStats {
        let c = &self.counters;
        ServerStats {
            accepted: c.accepted.load(Ordering::SeqCst),
            rejected_busy: c.rejected_busy.load(Ordering::SeqCst),
            active_sessions: c.active.load(Ordering::SeqCst),
            uploads: c.uploads.load(Ordering::SeqCst),
            cache_hits: c.cache_hits.load(Ordering::SeqCst),
            forwards: c.forwards.load(Ordering::SeqCst),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum CycleProgress {
    Idle,
    Data(Vec<f32>),
    Resolved { data: Vec<f32>, w: u32, h: u32 },
}

/// Responses produced for one incoming message.
#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub messages: Vec<Message>,
    /// The session must be torn down after the messages are written.
    pub close: bool,
}

impl Reply {
    fn send(msg: Message) -> Reply {
        Reply {
            messages: vec![msg],
            close: false,
        }
    }

    fn fail(code: ErrorCode, text: impl Into<String>) -> Reply {
        Reply {
            messages: vec![Message::error(code, text)],
            close: true,
        }
    }

    fn none() -> Reply {
        Reply {
            messages: Vec::new(),
            close: false,
        }
    }
}

/// Per-connection protocol state.
#[derive(Debug)]
pub struct SessionState {
    id: u64,
    peer: Option<SocketAddr>,
    version: Option<u32>,
    model: Option<(Digest, ModelHandle)>,
    cycle: CycleProgress,
}

impl SessionState {
    pub fn new(id: u64, peer: Option<SocketAddr>) -> SessionState {
        SessionState {
            id,
            peer,
            version: None,
            model: None,
            cycle: CycleProgress::Idle,
        }
    }

    pub fn peer(&self) -> Option<SocketAddr> {
        self.peer
    }

    pub fn current_model(&self) -> Option<Digest> {
        self.model.map(|(d, _)| d)
    }

    pub fn mid_cycle(&self) -> bool {
        self.cycle != CycleProgress::Idle
    }

    /// Advances the session by one message.
    pub fn handle(&mut self, msg: Message, ctx: &ServerContext) -> Reply {
        let Some(_) = self.version else {
            return match msg {
                Message::Hello { version } if version == ctx.config.protocol_version => {
                    self.version = Some(version);
                    Reply::send(Message::HelloAck { version })
                }
                Message::Hello { version } => {
                    debug!(session = self.id, version, "version mismatch");
                    Reply {
                        messages: vec![Message::HelloAck {
                            version: ctx.config.protocol_version,
                        }],
                        close: true,
                    }
                }
                other => Reply::fail(
                    ErrorCode::Protocol,
                    format!("expected Hello, got {:?}", other.tag()),
                ),
            };
        };

        let tag = msg.tag();
        let cycle = std::mem::replace(&mut self.cycle, CycleProgress::Idle);
        match (msg, cycle) {
            (Message::ModelCheck { digest }, CycleProgress::Idle) => {
                match ctx.store.lookup(&digest) {
                    Some((handle, _)) => {
                        ctx.counters.cache_hits.fetch_add(1, Ordering::SeqCst);
                        self.model = Some((digest, handle));
                        Reply::send(Message::ModelAck { digest })
                    }
                    None => Reply::send(Message::ModelNeeded { digest }),
                }
            }
            (Message::ModelUpload(upload), CycleProgress::Idle) => self.upload(upload, ctx),
            (Message::FrameData { data }, CycleProgress::Idle) => {
                if self.model.is_none() {
                    return Reply::fail(ErrorCode::UnknownModel, "no model acknowledged yet");
                }
                self.cycle = CycleProgress::Data(data);
                Reply::none()
            }
            (Message::Resolution { w, h }, CycleProgress::Data(data)) => {
                if !(data.len() as u64).is_multiple_of(w as u64 * h as u64) {
                    return Reply::fail(
                        ErrorCode::InvalidFrame,
                        format!("{} elements do not tile a {w}x{h} frame", data.len()),
                    );
                }
                self.cycle = CycleProgress::Resolved { data, w, h };
                Reply::none()
            }
            (Message::FrameSize { elem_count }, CycleProgress::Resolved { data, w, h }) => {
                self.execute(elem_count, data, w, h, ctx)
            }
            (Message::Error { code, message }, _) => {
                debug!(session = self.id, code, %message, "peer reported error");
                Reply {
                    messages: Vec::new(),
                    close: true,
                }
            }
            (_, progress) => Reply::fail(
                ErrorCode::Protocol,
                format!("unexpected {tag:?} {}", describe(&progress)),
            ),
        }
    }

    fn upload(&mut self, upload: wire::ModelUpload, ctx: &ServerContext) -> Reply {
        let size = upload.structure.len() as u64 + upload.weights.len() as u64;
        if size > ctx.config.max_model_bytes {
            return Reply::fail(
                ErrorCode::TooLarge,
                format!(
                    "model of {size} bytes over {} limit",
                    ctx.config.max_model_bytes
                ),
            );
        }
        let claimed = upload.digest;
        let descriptor = match ModelDescriptor::from_upload(upload) {
            Ok(d) => d,
            Err(actual) => {
                return Reply::fail(
                    ErrorCode::InvalidModel,
                    format!("digest mismatch: claimed {claimed}, content {actual}"),
                )
            }
        };
        let handle = match ctx.store.lookup(&claimed) {
            Some((h, _)) => h,
            None => {
                let h = match ctx.accelerator.register_model(self.id, &descriptor) {
                    Ok(h) => h,
                    Err(e) => return Reply::fail(ErrorCode::InvalidModel, e.to_string()),
                };
                info!(session = self.id, digest = %claimed, name = descriptor.name(), "model registered");
                ctx.counters.uploads.fetch_add(1, Ordering::SeqCst);
                ctx.store.insert(descriptor, h);
                h
            }
        };
        self.model = Some((claimed, handle));
        Reply::send(Message::ModelAck { digest: claimed })
    }

    fn execute(
        &mut self,
        elem_count: u32,
        data: Vec<f32>,
        w: u32,
        h: u32,
        ctx: &ServerContext,
    ) -> Reply {
        if elem_count as usize != data.len() {
            return Reply::fail(
                ErrorCode::InvalidFrame,
                format!("frame size {elem_count} but {} elements sent", data.len()),
            );
        }
        let channels = (data.len() as u64 / (w as u64 * h as u64)) as u32;
        let frame = match Dims::new(1, channels, h, w)
            .map_err(|e| e.to_string())
            .and_then(|dims| Frame::new(dims, data).map_err(|e| e.to_string()))
        {
            Ok(f) => f,
            Err(e) => return Reply::fail(ErrorCode::InvalidFrame, e),
        };
        let (_, handle) = self.model.expect("model checked at FrameData");
        match ctx.accelerator.forward(self.id, handle, &frame) {
            Ok((heatmap, compute_s)) => {
                ctx.counters.forwards.fetch_add(1, Ordering::SeqCst);
                Reply::send(Message::ForwardResult {
                    compute_s,
                    data: heatmap.data,
                })
            }
            Err(e @ BackendError::UnknownModel(_)) => {
                Reply::fail(ErrorCode::UnknownModel, e.to_string())
            }
            Err(e) => Reply::fail(ErrorCode::Backend, e.to_string()),
        }
    }
}

fn describe(progress: &CycleProgress) -> &'static str {
    match progress {
        CycleProgress::Idle => "outside a cycle",
        CycleProgress::Data(_) => "after FrameData (expected Resolution)",
        CycleProgress::Resolved { .. } => "after Resolution (expected FrameSize)",
    }
}

/// Handle to a running server. Dropping it shuts the server down.
#[derive(Debug)]
pub struct RunningServer {
    addr: SocketAddr,
    ctx: Arc<ServerContext>,
    stopping: Arc<AtomicBool>,
    acceptor: Mutex<Option<JoinHandle<()>>>,
    sessions: Arc<Mutex<Vec<JoinHandle<()>>>>,
}

pub fn serve(
    bind: impl ToSocketAddrs,
    accelerator: Arc<Accelerator>,
    config: ServerConfig,
) -> Result<RunningServer, ServerError> {
    let listener = TcpListener::bind(bind).map_err(ServerError::BindFailed)?;
    listener
        .set_nonblocking(true)
        .map_err(ServerError::BindFailed)?;
    let addr = listener.local_addr().map_err(ServerError::BindFailed)?;
    let ctx = Arc::new(ServerContext::new(accelerator, config));
    let stopping = Arc::new(AtomicBool::new(false));
    let sessions = Arc::new(Mutex::new(Vec::new()));
    let acceptor = {
        let ctx = Arc::clone(&ctx);
        let stopping = Arc::clone(&stopping);
        let sessions = Arc::clone(&sessions);
        std::thread::Builder::new()
            .name("accel-accept".into())
            .spawn(move || accept_loop(listener, ctx, stopping, sessions))
            .expect("spawn acceptor")
    };
    info!(%addr, "serving");
    Ok(RunningServer {
        addr,
        ctx,
        stopping,
        acceptor: Mutex::new(Some(acceptor)),
        sessions,
    })
}

impl RunningServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn context(&self) -> &Arc<ServerContext> {
        &self.ctx
    }

    pub fn stats(&self) -> ServerStats {
        self.ctx.stats()
    }

    /// Backend execution order across all sessions.
    pub fn exec_log(&self) -> Vec<ExecEntry> {
        self.ctx.accelerator.exec_log()
    }

    /// Stops accepting, lets any cycle in progress finish (bounded by the
    /// cycle timeout), then closes every session. Safe to call repeatedly.
    pub fn shutdown(&self) {
        self.stopping.store(true, Ordering::SeqCst);
        let Some(acceptor) = self.acceptor.lock().unwrap().take() else {
            return;
        };
        let _ = acceptor.join();
        let handles: Vec<_> = self.sessions.lock().unwrap().drain(..).collect();
        for h in handles {
            let _ = h.join();
        }
        info!(addr = %self.addr, "shut down");
    }

    pub fn is_stopped(&self) -> bool {
        self.acceptor.lock().unwrap().is_none()
    }
}

impl Drop for RunningServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn accept_loop(
    listener: TcpListener,
    ctx: Arc<ServerContext>,
    stopping: Arc<AtomicBool>,
    sessions: Arc<Mutex<Vec<JoinHandle<()>>>>,
) {
    let next_id = AtomicU64::new(1);
    while !stopping.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let _ = stream.set_nonblocking(false);
                let ctx2 = Arc::clone(&ctx);
                let stop = Arc::clone(&stopping);
                let mut list = sessions.lock().unwrap();
                list.retain(|h| !h.is_finished());
                if ctx.counters.active.load(Ordering::SeqCst) >= ctx.config.max_sessions {
                    ctx.counters.rejected_busy.fetch_add(1, Ordering::SeqCst);
                    warn!(%peer, "rejecting session: server busy");
                    list.push(std::thread::spawn(move || reject_busy(stream)));
                    continue;
                }
                ctx.counters.active.fetch_add(1, Ordering::SeqCst);
                ctx.counters.accepted.fetch_add(1, Ordering::SeqCst);
                let id = next_id.fetch_add(1, Ordering::SeqCst);
                let handle = std::thread::Builder::new()
                    .name(format!("accel-session-{id}"))
                    .spawn(move || {
                        run_session(id, stream, peer, &ctx2, &stop);
                        ctx2.counters.active.fetch_sub(1, Ordering::SeqCst);
                    })
                    .expect("spawn session");
                list.push(handle);
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(2));
            }
            Err(e) => {
                warn!(error = %e, "accept failed");
                std::thread::sleep(Duration::from_millis(10));
            }
        }
    }
}

fn reject_busy(mut stream: TcpStream) {
    let _ = stream.set_read_timeout(Some(Duration::from_secs(1)));
    // Consume the Hello first so closing does not reset the connection
    // before the client has read the error.
    let mut reader = FrameReader::new(1024);
    let _ = reader.read_message(&mut stream);
    if let Ok(bytes) = wire::encode(&Message::error(ErrorCode::Busy, "session limit reached")) {
        let _ = stream.write_all(&bytes);
    }
    let _ = stream.shutdown(Shutdown::Write);
    let mut sink = [0u8; 256];
    while matches!(stream.read(&mut sink), Ok(n) if n > 0) {}
}

fn run_session(
    id: u64,
    mut stream: TcpStream,
    peer: SocketAddr,
    ctx: &ServerContext,
    stopping: &AtomicBool,
) {
    debug!(session = id, %peer, "session opened");
    let _ = stream.set_nodelay(true);
    let _ = stream.set_read_timeout(Some(ctx.config.poll_interval));
    let mut state = SessionState::new(id, Some(peer));
    let mut reader = FrameReader::new(MAX_FRAME_LEN);
    let mut drain_deadline: Option<Instant> = None;
    let mut out = Vec::new();
    loop {
        if stopping.load(Ordering::SeqCst) {
            if !state.mid_cycle() && reader.buffered() == 0 {
                break;
            }
            let deadline =
                *drain_deadline.get_or_insert_with(|| Instant::now() + ctx.config.cycle_timeout);
            if Instant::now() >= deadline {
                debug!(session = id, "aborting cycle at shutdown");
                break;
            }
        }
        let reply = match reader.read_message(&mut stream) {
            Ok((msg, _)) => state.handle(msg, ctx),
            Err(ReadError::TimedOut) => continue,
            Err(ReadError::Closed) => break,
            Err(ReadError::TooLarge(len, tag)) => {
                let code = if tag == Some(Tag::ModelUpload) {
                    ErrorCode::TooLarge
                } else {
                    ErrorCode::Protocol
                };
                Reply::fail(code, format!("frame of {len} bytes refused"))
            }
            Err(ReadError::Decode(e)) => Reply::fail(ErrorCode::Protocol, e.to_string()),
            Err(ReadError::Io(e)) => {
                debug!(session = id, error = %e, "read failed");
                break;
            }
        };
        // Large uploads are refused from the header alone.
        if state.version.is_some() {
            reader.set_tag_limit(
                Tag::ModelUpload,
                upload_frame_limit(ctx.config.max_model_bytes),
            );
        }
        out.clear();
        for m in &reply.messages {
            if wire::encode_into(m, &mut out).is_err() {
                break;
            }
        }
        if !out.is_empty() && stream.write_all(&out).is_err() {
            break;
        }
        if reply.close {
            let _ = stream.shutdown(Shutdown::Write);
            // Give the peer a moment to read the error before the socket
            // goes away.
            let _ = stream.set_read_timeout(Some(Duration::from_millis(200)));
            let mut sink = [0u8; 4096];
            while matches!(stream.read(&mut sink), Ok(n) if n > 0) {}
            break;
        }
    }
    let _ = stream.shutdown(Shutdown::Both);
    debug!(session = id, "session closed");
}

// Anything bigger than the model limit plus generous room for the name and
// fixed fields cannot be a valid upload.
fn upload_frame_limit(max_model_bytes: u64) -> u32 {
    max_model_bytes
        .saturating_add(1 << 16)
        .min(MAX_FRAME_LEN as u64) as u32
}
