//! Length-prefixed frames exchanged between master, worker and clients.
//!
//! ```text
//! +-----------+------+-----------------+
//! | len (u32) | type | payload         |
//! +-----------+------+-----------------+
//!   big-endian   1 B   len - 1 bytes
//! ```
//!
//! `len` counts the type byte and the payload. Protocol integers are
//! big-endian; tensor data is little-endian binary32.

use std::io::{self, Read, Write};

use crate::error::{Result, RuntimeError};

pub const PROTOCOL_VERSION: u16 = 1;
pub const MAX_PAYLOAD: usize = 16 * 1024 * 1024;
const HEADER: usize = 4;

/// Sender role announced in HELLO.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Master = 0,
    Worker = 1,
    Client = 2,
}

impl Role {
    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Role::Master),
            1 => Some(Role::Worker),
            2 => Some(Role::Client),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Both devices compute every batch jointly.
    Ha = 0,
    /// Devices take alternate batches with independent sub-networks.
    Ht = 1,
}

impl std::str::FromStr for Mode {
    type Err = RuntimeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "HA" => Ok(Mode::Ha),
            "HT" => Ok(Mode::Ht),
            _ => Err(RuntimeError::Invalid(format!("unknown mode {s:?} (HA or HT)"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Ha => "HA",
            Mode::Ht => "HT",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorCode {
    ModelMismatch,
    VersionMismatch,
    Protocol,
    /// The system cannot serve any request until restarted.
    Halted,
    ModeRejected,
    /// Not serving right now; the request may be resent (possibly elsewhere).
    Retry,
    ShuttingDown,
    BadRequest,
    Internal,
    Other(u16),
}

impl ErrorCode {
    pub fn to_u16(self) -> u16 {
        match self {
            ErrorCode::ModelMismatch => 1,
            ErrorCode::VersionMismatch => 2,
            ErrorCode::Protocol => 3,
            ErrorCode::Halted => 4,
            ErrorCode::ModeRejected => 5,
            ErrorCode::Retry => 6,
            ErrorCode::ShuttingDown => 7,
            ErrorCode::BadRequest => 8,
            ErrorCode::Internal => 9,
            ErrorCode::Other(c) => c,
        }
    }

    pub fn from_u16(c: u16) -> Self {
        match c {
            1 => ErrorCode::ModelMismatch,
            2 => ErrorCode::VersionMismatch,
            3 => ErrorCode::Protocol,
            4 => ErrorCode::Halted,
            5 => ErrorCode::ModeRejected,
            6 => ErrorCode::Retry,
            7 => ErrorCode::ShuttingDown,
            8 => ErrorCode::BadRequest,
            9 => ErrorCode::Internal,
            other => ErrorCode::Other(other),
        }
    }

    pub fn is_retriable(self) -> bool {
        matches!(self, ErrorCode::Retry)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello {
        role: Role,
        version: u16,
        digest: [u8; 8],
    },
    Heartbeat {
        seq: u32,
        sent_us: u64,
    },
    SetMode(Mode),
    InferReq {
        req_id: u32,
        count: u16,
        images: Vec<f32>,
    },
    /// Pooled activations of `groups.0..groups.1` after conv layer `layer`.
    ActChunk {
        req_id: u32,
        layer: u8,
        groups: (u8, u8),
        height: u16,
        width: u16,
        data: Vec<f32>,
    },
    PartialLogits {
        req_id: u32,
        count: u16,
        logits: Vec<f32>,
    },
    Result {
        req_id: u32,
        count: u16,
        labels: Vec<u8>,
        latency_us: u64,
    },
    Shutdown,
    Error {
        code: ErrorCode,
        message: String,
    },
}

impl Message {
    pub fn type_byte(&self) -> u8 {
        match self {
            Message::Hello { .. } => 0x01,
            Message::Heartbeat { .. } => 0x02,
            Message::SetMode(_) => 0x03,
            Message::InferReq { .. } => 0x04,
            Message::ActChunk { .. } => 0x05,
            Message::PartialLogits { .. } => 0x06,
            Message::Result { .. } => 0x07,
            Message::Shutdown => 0x08,
            Message::Error { .. } => 0x09,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "HELLO",
            Message::Heartbeat { .. } => "HEARTBEAT",
            Message::SetMode(_) => "SET_MODE",
            Message::InferReq { .. } => "INFER_REQ",
            Message::ActChunk { .. } => "ACT_CHUNK",
            Message::PartialLogits { .. } => "PARTIAL_LOGITS",
            Message::Result { .. } => "RESULT",
            Message::Shutdown => "SHUTDOWN",
            Message::Error { .. } => "ERROR",
        }
    }

    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        Message::Error {
            code,
            message: message.into(),
        }
    }

    /// An ERROR answering request `req_id`; the id leads the text.
    pub fn request_error(code: ErrorCode, req_id: u32, why: impl std::fmt::Display) -> Self {
        Message::error(code, format!("req {req_id}: {why}"))
    }

    /// The request an ERROR answers, if its text names one.
    pub fn error_req_id(&self) -> Option<u32> {
        match self {
            Message::Error { message, .. } => message.strip_prefix("req ")?.split(':').next()?.parse().ok(),
            _ => None,
        }
    }

    fn payload_len(&self) -> usize {
        match self {
            Message::Hello { .. } => 11,
            Message::Heartbeat { .. } => 12,
            Message::SetMode(_) => 1,
            Message::InferReq { images, .. } => 6 + 4 * images.len(),
            Message::ActChunk { data, .. } => 11 + 4 * data.len(),
            Message::PartialLogits { logits, .. } => 6 + 4 * logits.len(),
            Message::Result { labels, .. } => 14 + labels.len(),
            Message::Shutdown => 0,
            Message::Error { message, .. } => 2 + message.len(),
        }
    }
}

/// Total frame size of `msg` on the wire.
pub fn encoded_len(msg: &Message) -> usize {
    HEADER + 1 + msg.payload_len()
}

fn put_floats(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_frame(msg: &Message) -> Result<Vec<u8>> {
    let payload = msg.payload_len();
    if payload > MAX_PAYLOAD {
        return Err(RuntimeError::Protocol(format!(
            "{} payload of {payload} bytes exceeds {MAX_PAYLOAD}",
            msg.name()
        )));
    }
    let mut out = Vec::with_capacity(HEADER + 1 + payload);
    out.extend_from_slice(&((payload + 1) as u32).to_be_bytes());
    out.push(msg.type_byte());
    match msg {
        Message::Hello { role, version, digest } => {
            out.push(*role as u8);
            out.extend_from_slice(&version.to_be_bytes());
            out.extend_from_slice(digest);
        }
        Message::Heartbeat { seq, sent_us } => {
            out.extend_from_slice(&seq.to_be_bytes());
            out.extend_from_slice(&sent_us.to_be_bytes());
        }
        Message::SetMode(mode) => out.push(*mode as u8),
        Message::InferReq { req_id, count, images } => {
            out.extend_from_slice(&req_id.to_be_bytes());
            out.extend_from_slice(&count.to_be_bytes());
            put_floats(&mut out, images);
        }
        Message::ActChunk {
            req_id,
            layer,
            groups,
            height,
            width,
            data,
        } => {
            out.extend_from_slice(&req_id.to_be_bytes());
            out.push(*layer);
            out.push(groups.0);
            out.push(groups.1);
            out.extend_from_slice(&height.to_be_bytes());
            out.extend_from_slice(&width.to_be_bytes());
            put_floats(&mut out, data);
        }
        Message::PartialLogits { req_id, count, logits } => {
            out.extend_from_slice(&req_id.to_be_bytes());
            out.extend_from_slice(&count.to_be_bytes());
            put_floats(&mut out, logits);
        }
        Message::Result {
            req_id,
            count,
            labels,
            latency_us,
        } => {
            if labels.len() != usize::from(*count) {
                return Err(RuntimeError::Protocol(format!(
                    "RESULT count {count} but {} labels",
                    labels.len()
                )));
            }
            out.extend_from_slice(&req_id.to_be_bytes());
            out.extend_from_slice(&count.to_be_bytes());
            out.extend_from_slice(labels);
            out.extend_from_slice(&latency_us.to_be_bytes());
        }
        Message::Shutdown => {}
        Message::Error { code, message } => {
            out.extend_from_slice(&code.to_u16().to_be_bytes());
            out.extend_from_slice(message.as_bytes());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FrameError {
    /// The buffer holds only part of a frame; at least `needed` bytes in total are required.
    #[error("incomplete frame: need {needed} bytes")]
    Incomplete { needed: usize },
    #[error("{0}")]
    Protocol(String),
}

fn proto(msg: impl Into<String>) -> FrameError {
    FrameError::Protocol(msg.into())
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
    what: &'static str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FrameError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.at..end];
                self.at = end;
                Ok(s)
            }
            None => Err(proto(format!("{} payload too short", self.what))),
        }
    }
    fn u8(&mut self) -> Result<u8, FrameError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, FrameError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }
    fn u32(&mut self) -> Result<u32, FrameError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, FrameError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.at..];
        self.at = self.buf.len();
        s
    }
    fn floats(&mut self) -> Result<Vec<f32>, FrameError> {
        let rest = self.rest();
        if !rest.len().is_multiple_of(4) {
            return Err(proto(format!("{} float data of {} bytes", self.what, rest.len())));
        }
        Ok(rest
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
    fn finish(&self) -> Result<(), FrameError> {
        if self.at != self.buf.len() {
            return Err(proto(format!(
                "{} has {} trailing bytes",
                self.what,
                self.buf.len() - self.at
            )));
        }
        Ok(())
    }
}

/// Validates a frame header and returns the number of bytes after it.
pub fn frame_body_len(header: [u8; 4]) -> Result<usize, FrameError> {
    let len = u32::from_be_bytes(header) as usize;
    if len == 0 {
        return Err(proto("frame length 0 has no type byte"));
    }
    if len - 1 > MAX_PAYLOAD {
        return Err(proto(format!("declared payload {} exceeds {MAX_PAYLOAD}", len - 1)));
    }
    Ok(len)
}

/// Decodes the first frame in `buf`, returning the message and the number
/// of bytes consumed.
pub fn decode_frame(buf: &[u8]) -> Result<(Message, usize), FrameError> {
    if buf.len() < HEADER {
        return Err(FrameError::Incomplete { needed: HEADER });
    }
    let body = frame_body_len([buf[0], buf[1], buf[2], buf[3]])?;
    let total = HEADER + body;
    if buf.len() < total {
        return Err(FrameError::Incomplete { needed: total });
    }
    let msg = decode_body(buf[HEADER], &buf[HEADER + 1..total])?;
    Ok((msg, total))
}

fn decode_body(ty: u8, payload: &[u8]) -> Result<Message, FrameError> {
    let what = match ty {
        0x01 => "HELLO",
        0x02 => "HEARTBEAT",
        0x03 => "SET_MODE",
        0x04 => "INFER_REQ",
        0x05 => "ACT_CHUNK",
        0x06 => "PARTIAL_LOGITS",
        0x07 => "RESULT",
        0x08 => "SHUTDOWN",
        0x09 => "ERROR",
        _ => return Err(proto(format!("unknown message type {ty:#04x}"))),
    };
    let mut c = Cursor { buf: payload, at: 0, what };
    let msg = match ty {
        0x01 => {
            let role = c.u8()?;
            let role = Role::from_byte(role).ok_or_else(|| proto(format!("HELLO role {role}")))?;
            let version = c.u16()?;
            let digest = c.take(8)?.try_into().expect("8 bytes");
            Message::Hello { role, version, digest }
        }
        0x02 => Message::Heartbeat {
            seq: c.u32()?,
            sent_us: c.u64()?,
        },
        0x03 => match c.u8()? {
            0 => Message::SetMode(Mode::Ha),
            1 => Message::SetMode(Mode::Ht),
            m => return Err(proto(format!("SET_MODE value {m}"))),
        },
        0x04 => Message::InferReq {
            req_id: c.u32()?,
            count: c.u16()?,
            images: c.floats()?,
        },
        0x05 => Message::ActChunk {
            req_id: c.u32()?,
            layer: c.u8()?,
            groups: (c.u8()?, c.u8()?),
            height: c.u16()?,
            width: c.u16()?,
            data: c.floats()?,
        },
        0x06 => Message::PartialLogits {
            req_id: c.u32()?,
            count: c.u16()?,
            logits: c.floats()?,
        },
        0x07 => {
            let req_id = c.u32()?;
            let count = c.u16()?;
            let labels = c.take(usize::from(count))?.to_vec();
            let latency_us = c.u64()?;
            Message::Result {
                req_id,
                count,
                labels,
                latency_us,
            }
        }
        0x08 => Message::Shutdown,
        _ => {
            let code = ErrorCode::from_u16(c.u16()?);
            let message = std::str::from_utf8(c.rest())
                .map_err(|e| proto(format!("ERROR message is not utf-8: {e}")))?
                .to_owned();
            Message::Error { code, message }
        }
    };
    c.finish()?;
    Ok(msg)
}

pub fn write_frame(w: &mut impl Write, msg: &Message) -> Result<()> {
    w.write_all(&encode_frame(msg)?)?;
    w.flush()?;
    Ok(())
}

/// Blocking read of one frame. `Ok(None)` on clean end of stream at a frame boundary.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Message>> {
    let mut header = [0u8; HEADER];
    let mut got = 0;
    while got < HEADER {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(RuntimeError::Closed("stream ended inside a frame header".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let body = frame_body_len(header).map_err(|e| RuntimeError::Protocol(e.to_string()))?;
    let mut buf = vec![0u8; body];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => RuntimeError::Closed("stream ended inside a frame".into()),
        _ => e.into(),
    })?;
    decode_body(buf[0], &buf[1..])
        .map(Some)
        .map_err(|e| RuntimeError::Protocol(e.to_string()))
}
