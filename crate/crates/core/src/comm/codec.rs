//! Framed binary wire format.
//!
//! ```text
//! frame   = magic "FL" | version u8 = 1 | msg_type u8 | payload_len u64 | payload
//! ```
//!
//! All integers are little-endian, floats IEEE-754 binary64 little-endian.
//! Strings in REGISTER and JSON documents in MODEL/UPDATE carry a u32 byte
//! length; the text of an ERROR runs to the end of the payload.

use std::io::{Read, Write};

use serde_json::{Map, Value};
use thiserror::Error;

pub const MAGIC: [u8; 2] = *b"FL";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 12;
/// Frames announcing a larger payload are refused before allocation.
pub const MAX_PAYLOAD: u64 = 1 << 30;

pub const ERR_AUTH: u16 = 1;
pub const ERR_PROTOCOL: u16 = 2;
pub const ERR_SECAGG_DROPOUT: u16 = 3;
pub const ERR_INTERNAL: u16 = 4;

pub mod msg_type {
    pub const ERROR: u8 = 0x00;
    pub const REGISTER: u8 = 0x01;
    pub const REGISTER_ACK: u8 = 0x02;
    pub const GET_MODEL: u8 = 0x03;
    pub const MODEL: u8 = 0x04;
    pub const UPDATE: u8 = 0x05;
    pub const ACK: u8 = 0x06;
    pub const DONE: u8 = 0x07;
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 2]),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unknown message type {0:#04x}")]
    UnknownType(u8),
    #[error("truncated frame: need {needed} bytes, have {have}")]
    Truncated { needed: u64, have: u64 },
    #[error("payload length {declared} does not match the {actual} bytes present")]
    LengthMismatch { declared: u64, actual: u64 },
    #[error("payload of {0} bytes exceeds the frame size limit")]
    TooLarge(u64),
    #[error("malformed JSON: {0}")]
    MalformedJson(String),
    #[error("invalid UTF-8 text")]
    InvalidUtf8,
    #[error("invalid payload flag {0}")]
    InvalidFlag(u8),
    #[error("malformed payload: {0}")]
    Malformed(&'static str),
}

impl DecodeError {
    /// Stable numeric identity of each failure kind.
    pub fn code(&self) -> u8 {
        match self {
            DecodeError::BadMagic(_) => 1,
            DecodeError::BadVersion(_) => 2,
            DecodeError::UnknownType(_) => 3,
            DecodeError::Truncated { .. } => 4,
            DecodeError::LengthMismatch { .. } => 5,
            DecodeError::TooLarge(_) => 6,
            DecodeError::MalformedJson(_) => 7,
            DecodeError::InvalidUtf8 => 8,
            DecodeError::InvalidFlag(_) => 9,
            DecodeError::Malformed(_) => 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WirePayload {
    Plain(Vec<f64>),
    Masked(Vec<u64>),
}

impl WirePayload {
    pub fn len(&self) -> usize {
        match self {
            WirePayload::Plain(v) => v.len(),
            WirePayload::Masked(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Error { code: u16, text: String },
    Register { auth_token: String, client_name: String },
    RegisterAck { client_id: u32, digest: [u8; 32] },
    GetModel { client_id: u32 },
    Model { round: u32, params: Vec<f64>, metadata: Map<String, Value> },
    Update { client_id: u32, round: u32, sample_count: u64, payload: WirePayload, metrics: Map<String, Value> },
    Ack,
    Done { final_round: u32 },
}

impl Message {
    pub fn msg_type(&self) -> u8 {
        match self {
            Message::Error { .. } => msg_type::ERROR,
            Message::Register { .. } => msg_type::REGISTER,
            Message::RegisterAck { .. } => msg_type::REGISTER_ACK,
            Message::GetModel { .. } => msg_type::GET_MODEL,
            Message::Model { .. } => msg_type::MODEL,
            Message::Update { .. } => msg_type::UPDATE,
            Message::Ack => msg_type::ACK,
            Message::Done { .. } => msg_type::DONE,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Message::Error { .. } => "ERROR",
            Message::Register { .. } => "REGISTER",
            Message::RegisterAck { .. } => "REGISTER_ACK",
            Message::GetModel { .. } => "GET_MODEL",
            Message::Model { .. } => "MODEL",
            Message::Update { .. } => "UPDATE",
            Message::Ack => "ACK",
            Message::Done { .. } => "DONE",
        }
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_json(out: &mut Vec<u8>, map: &Map<String, Value>) {
    let text = serde_json::to_string(map).expect("JSON maps always serialize");
    put_str(out, &text);
}

fn encode_payload(msg: &Message) -> Vec<u8> {
    let mut p = Vec::new();
    match msg {
        Message::Error { code, text } => {
            p.extend_from_slice(&code.to_le_bytes());
            p.extend_from_slice(text.as_bytes());
        }
        Message::Register { auth_token, client_name } => {
            put_str(&mut p, auth_token);
            put_str(&mut p, client_name);
        }
        Message::RegisterAck { client_id, digest } => {
            p.extend_from_slice(&client_id.to_le_bytes());
            p.extend_from_slice(digest);
        }
        Message::GetModel { client_id } => p.extend_from_slice(&client_id.to_le_bytes()),
        Message::Model { round, params, metadata } => {
            p.extend_from_slice(&round.to_le_bytes());
            p.extend_from_slice(&(params.len() as u64).to_le_bytes());
            for v in params {
                p.extend_from_slice(&v.to_le_bytes());
            }
            put_json(&mut p, metadata);
        }
        Message::Update { client_id, round, sample_count, payload, metrics } => {
            p.extend_from_slice(&client_id.to_le_bytes());
            p.extend_from_slice(&round.to_le_bytes());
            p.extend_from_slice(&sample_count.to_le_bytes());
            match payload {
                WirePayload::Plain(v) => {
                    p.push(0);
                    p.extend_from_slice(&(v.len() as u64).to_le_bytes());
                    for x in v {
                        p.extend_from_slice(&x.to_le_bytes());
                    }
                }
                WirePayload::Masked(v) => {
                    p.push(1);
                    p.extend_from_slice(&(v.len() as u64).to_le_bytes());
                    for x in v {
                        p.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
            put_json(&mut p, metrics);
        }
        Message::Ack => {}
        Message::Done { final_round } => p.extend_from_slice(&final_round.to_le_bytes()),
    }
    p
}

pub fn encode_message(msg: &Message) -> Vec<u8> {
    let payload = encode_payload(msg);
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(msg.msg_type());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

/// Validated frame header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHeader {
    pub msg_type: u8,
    pub payload_len: u64,
}

pub fn decode_header(bytes: &[u8; HEADER_LEN]) -> Result<FrameHeader, DecodeError> {
    let magic = [bytes[0], bytes[1]];
    if magic != MAGIC {
        return Err(DecodeError::BadMagic(magic));
    }
    if bytes[2] != VERSION {
        return Err(DecodeError::BadVersion(bytes[2]));
    }
    let msg_type = bytes[3];
    if msg_type > msg_type::DONE {
        return Err(DecodeError::UnknownType(msg_type));
    }
    let payload_len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes"));
    if payload_len > MAX_PAYLOAD {
        return Err(DecodeError::TooLarge(payload_len));
    }
    Ok(FrameHeader { msg_type, payload_len })
}

/// Decodes exactly one complete frame.
pub fn decode_message(bytes: &[u8]) -> Result<Message, DecodeError> {
    let have = bytes.len() as u64;
    if bytes.len() < HEADER_LEN {
        // Reject a wrong prefix as early as it is visible.
        if bytes.len() >= 2 && bytes[..2] != MAGIC {
            return Err(DecodeError::BadMagic([bytes[0], bytes[1]]));
        }
        return Err(DecodeError::Truncated { needed: HEADER_LEN as u64, have });
    }
    let header = decode_header(bytes[..HEADER_LEN].try_into().expect("header length"))?;
    let body = &bytes[HEADER_LEN..];
    let actual = body.len() as u64;
    if actual < header.payload_len {
        return Err(DecodeError::Truncated { needed: HEADER_LEN as u64 + header.payload_len, have });
    }
    if actual > header.payload_len {
        return Err(DecodeError::LengthMismatch { declared: header.payload_len, actual });
    }
    decode_payload(header.msg_type, body)
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.buf.len() < n {
            return Err(DecodeError::Malformed("field runs past the end of the payload"));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn count(&mut self, elem_size: usize) -> Result<usize, DecodeError> {
        let n = self.u64()?;
        if n > (self.buf.len() / elem_size) as u64 {
            return Err(DecodeError::Malformed("array length exceeds the payload"));
        }
        Ok(n as usize)
    }

    fn string(&mut self) -> Result<String, DecodeError> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| DecodeError::InvalidUtf8)
    }

    fn json_object(&mut self) -> Result<Map<String, Value>, DecodeError> {
        let text = self.string()?;
        match serde_json::from_str::<Value>(&text) {
            Ok(Value::Object(map)) => Ok(map),
            Ok(_) => Err(DecodeError::MalformedJson("expected a JSON object".into())),
            Err(e) => Err(DecodeError::MalformedJson(e.to_string())),
        }
    }

    fn finish(self) -> Result<(), DecodeError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(DecodeError::Malformed("trailing bytes after the last field"))
        }
    }
}

fn decode_payload(kind: u8, body: &[u8]) -> Result<Message, DecodeError> {
    let mut c = Cursor { buf: body };
    let msg = match kind {
        msg_type::ERROR => {
            let code = c.u16()?;
            let text = std::str::from_utf8(c.buf).map_err(|_| DecodeError::InvalidUtf8)?.to_string();
            c.buf = &[];
            Message::Error { code, text }
        }
        msg_type::REGISTER => Message::Register { auth_token: c.string()?, client_name: c.string()? },
        msg_type::REGISTER_ACK => {
            let client_id = c.u32()?;
            let digest: [u8; 32] = c.take(32)?.try_into().unwrap();
            Message::RegisterAck { client_id, digest }
        }
        msg_type::GET_MODEL => Message::GetModel { client_id: c.u32()? },
        msg_type::MODEL => {
            let round = c.u32()?;
            let n = c.count(8)?;
            let params = (0..n).map(|_| c.u64().map(f64::from_bits)).collect::<Result<_, _>>()?;
            Message::Model { round, params, metadata: c.json_object()? }
        }
        msg_type::UPDATE => {
            let client_id = c.u32()?;
            let round = c.u32()?;
            let sample_count = c.u64()?;
            let flag = c.u8()?;
            let payload = match flag {
                0 => {
                    let n = c.count(8)?;
                    WirePayload::Plain((0..n).map(|_| c.u64().map(f64::from_bits)).collect::<Result<_, _>>()?)
                }
                1 => {
                    let n = c.count(8)?;
                    WirePayload::Masked((0..n).map(|_| c.u64()).collect::<Result<_, _>>()?)
                }
                other => return Err(DecodeError::InvalidFlag(other)),
            };
            Message::Update { client_id, round, sample_count, payload, metrics: c.json_object()? }
        }
        msg_type::ACK => Message::Ack,
        msg_type::DONE => Message::Done { final_round: c.u32()? },
        other => return Err(DecodeError::UnknownType(other)),
    };
    c.finish()?;
    Ok(msg)
}

/// Errors while reading a frame from a stream.
#[derive(Debug, Error)]
pub enum FrameError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

/// Reads one frame; the header is validated before the payload is read.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Message, FrameError> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)?;
    let h = decode_header(&header)?;
    let mut body = vec![0u8; h.payload_len as usize];
    r.read_exact(&mut body)?;
    Ok(decode_payload(h.msg_type, &body)?)
}

pub fn write_frame<W: Write>(w: &mut W, msg: &Message) -> std::io::Result<()> {
    w.write_all(&encode_message(msg))?;
    w.flush()
}
