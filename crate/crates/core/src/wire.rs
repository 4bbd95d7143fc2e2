//! Binary message set shared by the host and destination nodes.
//!
//! Every frame on the wire is `[len: u32 LE][tag: u8][payload]`, where `len`
//! counts the tag byte plus the payload. All integers and reals are
//! little-endian; frame data travels as IEEE-754 single precision.

use std::fmt;
use std::io::{self, Read};

use sha2::{Digest as _, Sha256};
use thiserror::Error;

/// Largest value the length prefix may carry.
pub const MAX_FRAME_LEN: u32 = i32::MAX as u32;

/// Length prefix plus tag byte.
pub const FRAME_HEADER_LEN: usize = 5;

/// Largest height or width accepted on the wire.
pub const MAX_SIDE: u32 = 65_535;

/// Protocol version spoken by this build.
pub const PROTOCOL_VERSION: u32 = 1;

/// Bytes added by framing to one execution cycle on top of the data volume
/// counted by [`transfer_size`]: four frame headers (FrameData, Resolution,
/// FrameSize, ForwardResult), the element-count fields of FrameData and
/// ForwardResult, and the 8-byte compute time prepended to ForwardResult.
pub const CYCLE_FRAMING_OVERHEAD: u64 = 4 * FRAME_HEADER_LEN as u64 + 4 + 4 + 8;

// FrameData itself can never exceed the frame limit.
const MAX_ELEMS: u64 = (MAX_FRAME_LEN as u64 - 1 - 4 - 8) / 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Tag {
    Hello = 0x01,
    HelloAck = 0x02,
    FrameSize = 0x03,
    Resolution = 0x04,
    FrameData = 0x05,
    ForwardResult = 0x06,
    ModelCheck = 0x07,
    ModelNeeded = 0x08,
    ModelUpload = 0x09,
    ModelAck = 0x0A,
    Error = 0x0B,
}

impl Tag {
    pub const ALL: [Tag; 11] = [
        Tag::Hello,
        Tag::HelloAck,
        Tag::FrameSize,
        Tag::Resolution,
        Tag::FrameData,
        Tag::ForwardResult,
        Tag::ModelCheck,
        Tag::ModelNeeded,
        Tag::ModelUpload,
        Tag::ModelAck,
        Tag::Error,
    ];

    pub fn from_byte(b: u8) -> Option<Tag> {
        Tag::ALL.iter().copied().find(|t| *t as u8 == b)
    }
}

/// Frame dimensions in (batch, channels, height, width) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Dims {
    n: u32,
    channels: u32,
    height: u32,
    width: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DimsError {
    #[error("every dimension must be at least 1")]
    Zero,
    #[error("height and width must not exceed {MAX_SIDE}")]
    SideTooLarge,
    #[error("element count {0} does not fit in one frame")]
    TooManyElements(u64),
}

impl Dims {
    pub fn new(n: u32, channels: u32, height: u32, width: u32) -> Result<Dims, DimsError> {
        if n == 0 || channels == 0 || height == 0 || width == 0 {
            return Err(DimsError::Zero);
        }
        if height > MAX_SIDE || width > MAX_SIDE {
            return Err(DimsError::SideTooLarge);
        }
        let count = n as u64 * channels as u64 * height as u64 * width as u64;
        if count > MAX_ELEMS {
            return Err(DimsError::TooManyElements(count));
        }
        Ok(Dims {
            n,
            channels,
            height,
            width,
        })
    }

    /// Single-image frame of `channels × height × width`.
    pub fn image(channels: u32, height: u32, width: u32) -> Result<Dims, DimsError> {
        Dims::new(1, channels, height, width)
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn channels(&self) -> u32 {
        self.channels
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn elem_count(&self) -> u64 {
        self.n as u64 * self.channels as u64 * self.height as u64 * self.width as u64
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{}x{}x{}",
            self.n, self.channels, self.height, self.width
        )
    }
}

/// 256-bit content digest (SHA-256).
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..16])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

pub fn digest(bytes: &[u8]) -> Digest {
    Digest(Sha256::digest(bytes).into())
}

/// A cacheable model: structure and weights blobs plus the output constant.
///
/// The digest covers the structure length, the structure bytes, the weights
/// bytes and `c`, so models that differ only in `c` are cached separately.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelDescriptor {
    name: String,
    structure: Vec<u8>,
    weights: Vec<u8>,
    c: f64,
    digest: Digest,
}

impl ModelDescriptor {
    pub fn new(
        name: impl Into<String>,
        structure: Vec<u8>,
        weights: Vec<u8>,
        c: f64,
    ) -> ModelDescriptor {
        let digest = model_digest(&structure, &weights, c);
        ModelDescriptor {
            name: name.into(),
            structure,
            weights,
            c,
            digest,
        }
    }

    /// Rebuilds a descriptor from an upload, rejecting it when the claimed
    /// digest does not match the content.
    pub fn from_upload(upload: ModelUpload) -> Result<ModelDescriptor, Digest> {
        let desc = ModelDescriptor::new(upload.name, upload.structure, upload.weights, upload.c);
        if desc.digest != upload.digest {
            return Err(desc.digest);
        }
        Ok(desc)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn structure(&self) -> &[u8] {
        &self.structure
    }

    pub fn weights(&self) -> &[u8] {
        &self.weights
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn digest(&self) -> Digest {
        self.digest
    }

    /// Size of the model blobs (structure plus weights).
    pub fn content_len(&self) -> u64 {
        self.structure.len() as u64 + self.weights.len() as u64
    }

    pub fn to_upload(&self) -> ModelUpload {
        ModelUpload {
            digest: self.digest,
            c: self.c,
            name: self.name.clone(),
            structure: self.structure.clone(),
            weights: self.weights.clone(),
        }
    }
}

fn model_digest(structure: &[u8], weights: &[u8], c: f64) -> Digest {
    let mut h = Sha256::new();
    h.update((structure.len() as u64).to_le_bytes());
    h.update(structure);
    h.update(weights);
    h.update(c.to_le_bytes());
    Digest(h.finalize().into())
}

/// Payload of a `ModelUpload` frame, as carried on the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelUpload {
    pub digest: Digest,
    pub c: f64,
    pub name: String,
    pub structure: Vec<u8>,
    pub weights: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello {
        version: u32,
    },
    HelloAck {
        version: u32,
    },
    FrameSize {
        elem_count: u32,
    },
    Resolution {
        w: u32,
        h: u32,
    },
    FrameData {
        data: Vec<f32>,
    },
    /// `compute_s` is the destination's measured backend time for the cycle.
    ForwardResult {
        compute_s: f64,
        data: Vec<f32>,
    },
    ModelCheck {
        digest: Digest,
    },
    ModelNeeded {
        digest: Digest,
    },
    ModelUpload(ModelUpload),
    ModelAck {
        digest: Digest,
    },
    Error {
        code: u32,
        message: String,
    },
}

impl Message {
    pub fn tag(&self) -> Tag {
        match self {
            Message::Hello { .. } => Tag::Hello,
            Message::HelloAck { .. } => Tag::HelloAck,
            Message::FrameSize { .. } => Tag::FrameSize,
            Message::Resolution { .. } => Tag::Resolution,
            Message::FrameData { .. } => Tag::FrameData,
            Message::ForwardResult { .. } => Tag::ForwardResult,
            Message::ModelCheck { .. } => Tag::ModelCheck,
            Message::ModelNeeded { .. } => Tag::ModelNeeded,
            Message::ModelUpload(_) => Tag::ModelUpload,
            Message::ModelAck { .. } => Tag::ModelAck,
            Message::Error { .. } => Tag::Error,
        }
    }

    pub fn error(code: ErrorCode, message: impl Into<String>) -> Message {
        Message::Error {
            code: code as u32,
            message: message.into(),
        }
    }

    fn payload_len(&self) -> u64 {
        match self {
            Message::Hello { .. } | Message::HelloAck { .. } | Message::FrameSize { .. } => 4,
            Message::Resolution { .. } => 8,
            Message::FrameData { data } => 4 + 4 * data.len() as u64,
            Message::ForwardResult { data, .. } => 8 + 4 + 4 * data.len() as u64,
            Message::ModelCheck { .. } | Message::ModelNeeded { .. } | Message::ModelAck { .. } => {
                32
            }
            Message::ModelUpload(u) => {
                32 + 8
                    + 4
                    + u.name.len() as u64
                    + 4
                    + u.structure.len() as u64
                    + 8
                    + u.weights.len() as u64
            }
            Message::Error { message, .. } => 4 + 4 + message.len() as u64,
        }
    }

    /// Total bytes this message occupies on the wire, header included.
    pub fn encoded_len(&self) -> u64 {
        4 + 1 + self.payload_len()
    }
}

/// Codes carried by `Error` messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum ErrorCode {
    Protocol = 1,
    Busy = 2,
    TooLarge = 3,
    UnknownModel = 4,
    VersionMismatch = 5,
    InvalidModel = 6,
    InvalidFrame = 7,
    Backend = 8,
    ShuttingDown = 9,
}

impl ErrorCode {
    pub fn from_u32(code: u32) -> Option<ErrorCode> {
        use ErrorCode::*;
        [
            Protocol,
            Busy,
            TooLarge,
            UnknownModel,
            VersionMismatch,
            InvalidModel,
            InvalidFrame,
            Backend,
            ShuttingDown,
        ]
        .into_iter()
        .find(|c| *c as u32 == code)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("frame of {0} bytes exceeds the {MAX_FRAME_LEN}-byte limit")]
    PayloadTooLarge(u64),
    #[error("field too long for its 32-bit length prefix")]
    FieldTooLong,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    /// Not an error: the buffer holds a partial frame and `needed` more bytes
    /// are required before decoding can make progress.
    #[error("incomplete frame, need {needed} more bytes")]
    Incomplete { needed: usize },
    #[error("unknown tag 0x{0:02x}")]
    UnknownTag(u8),
    #[error("malformed {tag:?} payload: {reason}")]
    MalformedPayload { tag: Option<Tag>, reason: String },
}

impl DecodeError {
    fn malformed(tag: Option<Tag>, reason: impl Into<String>) -> DecodeError {
        DecodeError::MalformedPayload {
            tag,
            reason: reason.into(),
        }
    }
}

/// Checks that a frame of `total` bytes (header included) is encodable.
pub fn check_frame_len(total: u64) -> Result<u32, EncodeError> {
    let len = total.saturating_sub(4);
    if len > MAX_FRAME_LEN as u64 {
        return Err(EncodeError::PayloadTooLarge(total));
    }
    Ok(len as u32)
}

pub fn encode(message: &Message) -> Result<Vec<u8>, EncodeError> {
    let mut out = Vec::new();
    encode_into(message, &mut out)?;
    Ok(out)
}

/// Appends the encoded frame to `out`.
pub fn encode_into(message: &Message, out: &mut Vec<u8>) -> Result<(), EncodeError> {
    let len = check_frame_len(message.encoded_len())?;
    out.reserve(len as usize + 4);
    out.extend_from_slice(&len.to_le_bytes());
    out.push(message.tag() as u8);
    match message {
        Message::Hello { version } | Message::HelloAck { version } => put_u32(out, *version),
        Message::FrameSize { elem_count } => put_u32(out, *elem_count),
        Message::Resolution { w, h } => {
            put_u32(out, *w);
            put_u32(out, *h);
        }
        Message::FrameData { data } => put_floats(out, data)?,
        Message::ForwardResult { compute_s, data } => {
            out.extend_from_slice(&compute_s.to_le_bytes());
            put_floats(out, data)?;
        }
        Message::ModelCheck { digest }
        | Message::ModelNeeded { digest }
        | Message::ModelAck { digest } => out.extend_from_slice(&digest.0),
        Message::ModelUpload(u) => {
            out.extend_from_slice(&u.digest.0);
            out.extend_from_slice(&u.c.to_le_bytes());
            put_u32(out, len32(u.name.len())?);
            out.extend_from_slice(u.name.as_bytes());
            put_u32(out, len32(u.structure.len())?);
            out.extend_from_slice(&u.structure);
            out.extend_from_slice(&(u.weights.len() as u64).to_le_bytes());
            out.extend_from_slice(&u.weights);
        }
        Message::Error { code, message } => {
            put_u32(out, *code);
            put_u32(out, len32(message.len())?);
            out.extend_from_slice(message.as_bytes());
        }
    }
    Ok(())
}

/// Encodes a FrameData frame straight from a borrowed slice; the bytes match
/// `encode(&Message::FrameData { data })`.
pub fn encode_frame_data(data: &[f32], out: &mut Vec<u8>) -> Result<(), EncodeError> {
    let len = check_frame_len(4 + 1 + 4 + 4 * data.len() as u64)?;
    out.reserve(len as usize + 4);
    out.extend_from_slice(&len.to_le_bytes());
    out.push(Tag::FrameData as u8);
    put_floats(out, data)
}

fn len32(n: usize) -> Result<u32, EncodeError> {
    u32::try_from(n).map_err(|_| EncodeError::FieldTooLong)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_floats(out: &mut Vec<u8>, data: &[f32]) -> Result<(), EncodeError> {
    put_u32(out, len32(data.len())?);
    out.extend(data.iter().flat_map(|v| v.to_le_bytes()));
    Ok(())
}

/// Decodes one frame from the front of `buf`, returning the message and the
/// number of bytes it occupied.
pub fn decode(buf: &[u8]) -> Result<(Message, usize), DecodeError> {
    if buf.len() < 4 {
        return Err(DecodeError::Incomplete {
            needed: 4 - buf.len(),
        });
    }
    let len = u32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]);
    if len == 0 {
        return Err(DecodeError::malformed(None, "zero-length frame"));
    }
    if len > MAX_FRAME_LEN {
        return Err(DecodeError::malformed(
            None,
            format!("length {len} over limit"),
        ));
    }
    if buf.len() < 5 {
        return Err(DecodeError::Incomplete { needed: 1 });
    }
    let tag = Tag::from_byte(buf[4]).ok_or(DecodeError::UnknownTag(buf[4]))?;
    let total = 4 + len as usize;
    if buf.len() < total {
        return Err(DecodeError::Incomplete {
            needed: total - buf.len(),
        });
    }
    let mut cur = Cursor {
        tag,
        bytes: &buf[5..total],
    };
    let msg = match tag {
        Tag::Hello => Message::Hello {
            version: cur.u32()?,
        },
        Tag::HelloAck => Message::HelloAck {
            version: cur.u32()?,
        },
        Tag::FrameSize => Message::FrameSize {
            elem_count: cur.count()?,
        },
        Tag::Resolution => {
            let w = cur.side()?;
            let h = cur.side()?;
            Message::Resolution { w, h }
        }
        Tag::FrameData => Message::FrameData {
            data: cur.floats()?,
        },
        Tag::ForwardResult => {
            let compute_s = cur.f64()?;
            if !(compute_s.is_finite() && compute_s >= 0.0) {
                return Err(DecodeError::malformed(
                    Some(tag),
                    "compute time not a duration",
                ));
            }
            Message::ForwardResult {
                compute_s,
                data: cur.floats()?,
            }
        }
        Tag::ModelCheck => Message::ModelCheck {
            digest: cur.digest()?,
        },
        Tag::ModelNeeded => Message::ModelNeeded {
            digest: cur.digest()?,
        },
        Tag::ModelAck => Message::ModelAck {
            digest: cur.digest()?,
        },
        Tag::ModelUpload => {
            let digest = cur.digest()?;
            let c = cur.f64()?;
            let name_len = cur.u32()? as u64;
            let name = cur.utf8(name_len)?;
            let struct_len = cur.u32()? as u64;
            let structure = cur.take(struct_len)?.to_vec();
            let weights_len = cur.u64()?;
            let weights = cur.take(weights_len)?.to_vec();
            Message::ModelUpload(ModelUpload {
                digest,
                c,
                name,
                structure,
                weights,
            })
        }
        Tag::Error => {
            let code = cur.u32()?;
            let msg_len = cur.u32()? as u64;
            Message::Error {
                code,
                message: cur.utf8(msg_len)?,
            }
        }
    };
    if !cur.bytes.is_empty() {
        return Err(DecodeError::malformed(
            Some(tag),
            format!("{} trailing bytes", cur.bytes.len()),
        ));
    }
    Ok((msg, total))
}

struct Cursor<'a> {
    tag: Tag,
    bytes: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: u64) -> Result<&'a [u8], DecodeError> {
        if n > self.bytes.len() as u64 {
            return Err(DecodeError::malformed(
                Some(self.tag),
                format!("field of {n} bytes overruns payload"),
            ));
        }
        let (head, rest) = self.bytes.split_at(n as usize);
        self.bytes = rest;
        Ok(head)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        Ok(self.take(N as u64)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64, DecodeError> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn digest(&mut self) -> Result<Digest, DecodeError> {
        Ok(Digest(self.array()?))
    }

    fn count(&mut self) -> Result<u32, DecodeError> {
        let n = self.u32()?;
        if n == 0 {
            return Err(DecodeError::malformed(Some(self.tag), "zero element count"));
        }
        Ok(n)
    }

    fn side(&mut self) -> Result<u32, DecodeError> {
        let v = self.u32()?;
        if v == 0 || v > MAX_SIDE {
            return Err(DecodeError::malformed(
                Some(self.tag),
                format!("side {v} outside 1..={MAX_SIDE}"),
            ));
        }
        Ok(v)
    }

    fn floats(&mut self) -> Result<Vec<f32>, DecodeError> {
        let n = self.count()? as u64;
        if self.bytes.len() as u64 != 4 * n {
            return Err(DecodeError::malformed(
                Some(self.tag),
                format!("{} data bytes for {n} declared elements", self.bytes.len()),
            ));
        }
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }

    fn utf8(&mut self, n: u64) -> Result<String, DecodeError> {
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| DecodeError::malformed(Some(self.tag), "invalid utf-8"))
    }
}

/// Number of output elements a model with constant `c` produces for an input
/// of `elem_count` elements: `elem_count / c` rounded half away from zero.
pub fn output_elems(elem_count: u64, c: f64) -> u64 {
    (elem_count as f64 / c).round() as u64
}

/// Bytes of data moved per execution cycle: the two resolution integers, the
/// frame-size integer, the frame itself and the returned result, all 4 bytes
/// per element.
///
/// # Panics
///
/// If `c` is not a positive finite number.
pub fn transfer_size(dims: Dims, c: f64) -> u64 {
    assert!(c.is_finite() && c > 0.0, "output constant must be positive");
    let e = dims.elem_count();
    2 * 4 + 4 + 4 * e + 4 * output_elems(e, c)
}

#[derive(Debug, Error)]
pub enum ReadError {
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("frame of {0} bytes exceeds the session limit")]
    TooLarge(u32, Option<Tag>),
    #[error("peer closed the connection")]
    Closed,
    /// The read timed out; any partial frame stays buffered.
    #[error("read timed out")]
    TimedOut,
    #[error(transparent)]
    Io(io::Error),
}

/// Per-session decode buffer. Partial frames survive read timeouts, so a
/// reader with a short socket timeout can poll without losing data.
#[derive(Debug)]
pub struct FrameReader {
    buf: Vec<u8>,
    filled: usize,
    limit: u32,
    tag_limits: Vec<(Tag, u32)>,
}

impl Default for FrameReader {
    fn default() -> Self {
        FrameReader::new(MAX_FRAME_LEN)
    }
}

impl FrameReader {
    pub fn new(limit: u32) -> FrameReader {
        FrameReader {
            buf: Vec::new(),
            filled: 0,
            limit,
            tag_limits: Vec::new(),
        }
    }

    pub fn set_limit(&mut self, limit: u32) {
        self.limit = limit;
    }

    /// Tighter length limit for frames carrying `tag`, checked as soon as the
    /// header arrives.
    pub fn set_tag_limit(&mut self, tag: Tag, limit: u32) {
        self.tag_limits.retain(|(t, _)| *t != tag);
        self.tag_limits.push((tag, limit));
    }

    fn limit_for(&self, tag: Option<Tag>) -> u32 {
        tag.and_then(|t| self.tag_limits.iter().find(|(x, _)| *x == t))
            .map_or(self.limit, |(_, l)| (*l).min(self.limit))
    }

    /// Bytes currently buffered.
    pub fn buffered(&self) -> usize {
        self.filled
    }

    /// Tag of the partially received frame, if the header has arrived.
    pub fn pending_tag(&self) -> Option<Tag> {
        (self.filled >= 5)
            .then(|| Tag::from_byte(self.buf[4]))
            .flatten()
    }

    /// Reads until one whole frame is buffered, then decodes it.
    pub fn read_message<R: Read>(&mut self, r: &mut R) -> Result<(Message, usize), ReadError> {
        loop {
            if self.filled >= 4 {
                let len = u32::from_le_bytes(self.buf[..4].try_into().unwrap());
                if len > self.limit_for(self.pending_tag()) {
                    return Err(ReadError::TooLarge(len, self.pending_tag()));
                }
            }
            match decode(&self.buf[..self.filled]) {
                Ok((msg, used)) => {
                    self.buf.copy_within(used..self.filled, 0);
                    self.filled -= used;
                    if self.buf.len() > 1 << 20 && self.filled < 1 << 16 {
                        self.buf.truncate(1 << 16);
                        self.buf.shrink_to_fit();
                    }
                    return Ok((msg, used));
                }
                Err(DecodeError::Incomplete { needed }) => {
                    let want = self.filled + needed.clamp(4096, 1 << 22);
                    if self.buf.len() < want {
                        self.buf.resize(want, 0);
                    }
                    match r.read(&mut self.buf[self.filled..]) {
                        Ok(0) => return Err(ReadError::Closed),
                        Ok(n) => self.filled += n,
                        Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                        Err(e)
                            if matches!(
                                e.kind(),
                                io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
                            ) =>
                        {
                            return Err(ReadError::TimedOut)
                        }
                        Err(e) if is_disconnect(&e) => return Err(ReadError::Closed),
                        Err(e) => return Err(ReadError::Io(e)),
                    }
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
}

pub(crate) fn is_disconnect(e: &io::Error) -> bool {
    matches!(
        e.kind(),
        io::ErrorKind::ConnectionReset
            | io::ErrorKind::ConnectionAborted
            | io::ErrorKind::BrokenPipe
            | io::ErrorKind::UnexpectedEof
            | io::ErrorKind::NotConnected
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hex(s: &str) -> Vec<u8> {
        s.split_whitespace()
            .map(|b| u8::from_str_radix(b, 16).unwrap())
            .collect()
    }

    #[test]
    fn frame_size_bytes() {
        let bytes = encode(&Message::FrameSize {
            elem_count: 724_224,
        })
        .unwrap();
        assert_eq!(bytes, hex("05 00 00 00 03 00 0D 0B 00"));
        assert_eq!(
            decode(&bytes).unwrap(),
            (
                Message::FrameSize {
                    elem_count: 724_224
                },
                9
            )
        );
    }

    #[test]
    fn resolution_bytes() {
        let bytes = encode(&Message::Resolution { w: 368, h: 656 }).unwrap();
        assert_eq!(bytes, hex("09 00 00 00 04 70 01 00 00 90 02 00 00"));
    }

    #[test]
    fn hello_bytes() {
        let bytes = encode(&Message::Hello { version: 1 }).unwrap();
        assert_eq!(bytes, hex("05 00 00 00 01 01 00 00 00"));
    }

    #[test]
    fn borrowed_frame_data_matches() {
        let data = vec![0.5f32, -1.0, 3.25];
        let mut out = Vec::new();
        encode_frame_data(&data, &mut out).unwrap();
        assert_eq!(out, encode(&Message::FrameData { data }).unwrap());
    }

    #[test]
    fn short_header_is_incomplete() {
        assert_eq!(
            decode(&[5, 0, 0]),
            Err(DecodeError::Incomplete { needed: 1 })
        );
        assert!(matches!(
            decode(&hex("05 00 00 00 03 00 0D")),
            Err(DecodeError::Incomplete { needed: 2 })
        ));
    }

    #[test]
    fn unknown_tag() {
        assert_eq!(
            decode(&hex("05 00 00 00 FF 00 00 00 00")),
            Err(DecodeError::UnknownTag(0xFF))
        );
        // detected before the payload arrives
        assert_eq!(
            decode(&hex("05 00 00 00 00")),
            Err(DecodeError::UnknownTag(0))
        );
    }

    #[test]
    fn malformed_lengths() {
        // FrameSize with a 5-byte payload
        let err = decode(&hex("06 00 00 00 03 01 00 00 00 00")).unwrap_err();
        assert!(matches!(
            err,
            DecodeError::MalformedPayload {
                tag: Some(Tag::FrameSize),
                ..
            }
        ));
        // FrameData declaring 2 elements but carrying 1
        let err = decode(&hex("09 00 00 00 05 02 00 00 00 00 00 80 3F")).unwrap_err();
        assert!(matches!(
            err,
            DecodeError::MalformedPayload {
                tag: Some(Tag::FrameData),
                ..
            }
        ));
        assert!(matches!(
            decode(&hex("00 00 00 00")),
            Err(DecodeError::MalformedPayload { tag: None, .. })
        ));
        assert!(matches!(
            decode(&hex("FF FF FF FF 01")),
            Err(DecodeError::MalformedPayload { tag: None, .. })
        ));
    }

    #[test]
    fn resolution_side_limits() {
        let mut bytes = encode(&Message::Resolution { w: 1, h: 65_535 }).unwrap();
        assert!(decode(&bytes).is_ok());
        bytes[9..13].copy_from_slice(&65_536u32.to_le_bytes());
        assert!(matches!(
            decode(&bytes),
            Err(DecodeError::MalformedPayload { .. })
        ));
        bytes[9..13].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(
            decode(&bytes),
            Err(DecodeError::MalformedPayload { .. })
        ));
    }

    #[test]
    fn frame_limit() {
        assert_eq!(check_frame_len(4 + MAX_FRAME_LEN as u64), Ok(MAX_FRAME_LEN));
        assert!(matches!(
            check_frame_len(5 + MAX_FRAME_LEN as u64),
            Err(EncodeError::PayloadTooLarge(_))
        ));
    }

    #[test]
    fn transfer_size_values() {
        let full = Dims::image(3, 368, 656).unwrap();
        assert_eq!(full.elem_count(), 724_224);
        assert_eq!(transfer_size(full, 3.368421), 3_756_924);
        assert_eq!(transfer_size(Dims::new(1, 1, 1, 1).unwrap(), 1.0), 20);
        assert_eq!(
            transfer_size(Dims::image(3, 100, 100).unwrap(), 3.368421),
            155_636
        );
    }

    #[test]
    fn cycle_overhead_counts_headers() {
        // FrameData + Resolution + FrameSize + ForwardResult frames minus the transfer_size volume
        let data = vec![0.0f32; 12];
        let out = vec![0.0f32; 4];
        let frames = [
            Message::FrameData { data },
            Message::Resolution { w: 2, h: 2 },
            Message::FrameSize { elem_count: 12 },
            Message::ForwardResult {
                compute_s: 0.0,
                data: out,
            },
        ];
        let wire: u64 = frames.iter().map(|m| encode(m).unwrap().len() as u64).sum();
        let dims = Dims::image(3, 2, 2).unwrap();
        assert_eq!(wire - transfer_size(dims, 3.0), CYCLE_FRAMING_OVERHEAD);
        assert_eq!(CYCLE_FRAMING_OVERHEAD, 36);
    }

    #[test]
    fn digest_basics() {
        assert_eq!(digest(b"abc"), digest(b"abc"));
        assert_ne!(digest(&[]), digest(&[0]));
        assert_eq!(
            digest(&[]).to_hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(
            digest(&[0]).to_hex(),
            "6e340b9cffb37a989ca544e6bb780a2c78901d3fb33738768511a30617afa01d"
        );
        let mut big = vec![0u8; 1 << 20];
        let before = digest(&big);
        big[123_456] ^= 0x10;
        assert_ne!(before, digest(&big));
    }

    #[test]
    fn model_digest_covers_c_and_split() {
        let a = ModelDescriptor::new("m", b"ab".to_vec(), b"c".to_vec(), 2.0);
        let b = ModelDescriptor::new("m", b"ab".to_vec(), b"c".to_vec(), 2.5);
        let split = ModelDescriptor::new("m", b"a".to_vec(), b"bc".to_vec(), 2.0);
        let renamed = ModelDescriptor::new("other", b"ab".to_vec(), b"c".to_vec(), 2.0);
        assert_ne!(a.digest(), b.digest());
        assert_ne!(a.digest(), split.digest());
        assert_eq!(a.digest(), renamed.digest());
    }

    #[test]
    fn upload_digest_verified() {
        let desc = ModelDescriptor::new("m", vec![1, 2, 3], vec![4; 10], 3.0);
        let up = desc.to_upload();
        assert_eq!(ModelDescriptor::from_upload(up.clone()).unwrap(), desc);
        let mut forged = up;
        forged.weights[0] = 9;
        assert!(ModelDescriptor::from_upload(forged).is_err());
    }

    #[test]
    fn reader_survives_split_reads() {
        let mut stream = Vec::new();
        encode_into(&Message::Hello { version: 1 }, &mut stream).unwrap();
        encode_into(
            &Message::FrameData {
                data: vec![1.5; 3000],
            },
            &mut stream,
        )
        .unwrap();
        // a reader that hands out 7 bytes at a time
        struct Trickle<'a>(&'a [u8]);
        impl Read for Trickle<'_> {
            fn read(&mut self, out: &mut [u8]) -> io::Result<usize> {
                let n = out.len().min(7).min(self.0.len());
                out[..n].copy_from_slice(&self.0[..n]);
                self.0 = &self.0[n..];
                Ok(n)
            }
        }
        let mut src = Trickle(&stream);
        let mut reader = FrameReader::default();
        assert_eq!(
            reader.read_message(&mut src).unwrap().0,
            Message::Hello { version: 1 }
        );
        let (msg, used) = reader.read_message(&mut src).unwrap();
        assert_eq!(used, 5 + 4 + 12_000);
        assert!(matches!(msg, Message::FrameData { ref data } if data.len() == 3000));
        assert!(matches!(
            reader.read_message(&mut src),
            Err(ReadError::Closed)
        ));
    }

    #[test]
    fn reader_enforces_tag_limit() {
        let mut reader = FrameReader::default();
        reader.set_tag_limit(Tag::ModelUpload, 100);
        let data = encode(&Message::FrameData {
            data: vec![0.0; 100],
        })
        .unwrap();
        assert!(reader.read_message(&mut &data[..]).is_ok());
        let m = ModelDescriptor::new("m", vec![1; 50], vec![2; 50], 1.0);
        let up = encode(&Message::ModelUpload(m.to_upload())).unwrap();
        // only the first 64 bytes ever arrive; the header alone decides
        let err = reader.read_message(&mut &up[..64]).unwrap_err();
        assert!(matches!(
            err,
            ReadError::TooLarge(_, Some(Tag::ModelUpload))
        ));
    }

    #[test]
    fn reader_enforces_limit() {
        let bytes = encode(&Message::FrameData {
            data: vec![0.0; 100],
        })
        .unwrap();
        let mut reader = FrameReader::new(64);
        let err = reader.read_message(&mut &bytes[..]).unwrap_err();
        assert!(matches!(
            err,
            ReadError::TooLarge(405, Some(Tag::FrameData))
        ));
    }
}
