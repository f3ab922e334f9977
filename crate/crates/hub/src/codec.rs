//! Length-prefixed JSON frames: a 4-byte big-endian payload length followed
//! by that many bytes of UTF-8 JSON.

use serde_json::Value;
use thiserror::Error;

use crate::protocol::Message;

/// Largest accepted payload, 1 MiB.
pub const MAX_FRAME: usize = 1 << 20;
pub const HEADER_LEN: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("frame of {declared} bytes exceeds the {limit}-byte limit")]
    Oversize { declared: usize, limit: usize },
    #[error("malformed payload at byte {offset}: {reason}")]
    Malformed { offset: u64, reason: String },
    #[error("payload at byte {offset} has no string \"type\" field")]
    MissingType { offset: u64 },
}

impl CodecError {
    /// Oversize frames leave the stream unsynchronized; the connection must
    /// close. Other errors skip one frame.
    pub fn is_fatal(&self) -> bool {
        matches!(self, CodecError::Oversize { .. })
    }
}

pub fn encode_frame(msg: &Message) -> Result<Vec<u8>, CodecError> {
    let payload = serde_json::to_vec(msg).expect("message serializes");
    if payload.len() > MAX_FRAME {
        return Err(CodecError::Oversize {
            declared: payload.len(),
            limit: MAX_FRAME,
        });
    }
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Byte index of serde_json's 1-based (line, column) inside `text`.
fn byte_index(text: &[u8], line: usize, column: usize) -> usize {
    let line_start = text
        .split_inclusive(|&b| b == b'\n')
        .take(line.saturating_sub(1))
        .map(<[u8]>::len)
        .sum::<usize>();
    (line_start + column.saturating_sub(1)).min(text.len())
}

/// Parses one payload. `base` is the payload's offset in the stream and
/// is added to reported error positions.
pub fn decode_payload(payload: &[u8], base: u64) -> Result<Message, CodecError> {
    let value: Value = serde_json::from_slice(payload).map_err(|e| CodecError::Malformed {
        offset: base + byte_index(payload, e.line(), e.column()) as u64,
        reason: e.to_string(),
    })?;
    if !value.get("type").is_some_and(Value::is_string) {
        return Err(CodecError::MissingType { offset: base });
    }
    serde_json::from_value(value).map_err(|e| CodecError::Malformed {
        offset: base,
        reason: e.to_string(),
    })
}

/// Decodes exactly one frame from the front of `bytes`, returning the
/// message and the bytes consumed. `Ok(None)` means more input is needed.
pub fn decode_frame(bytes: &[u8]) -> Result<Option<(Message, usize)>, CodecError> {
    let mut d = FrameDecoder::new();
    d.push(bytes);
    Ok(d.next_message()?.map(|m| (m, bytes.len() - d.buffered())))
}

/// Incremental decoder: feed it whatever the socket returned, then pull
/// messages until it asks for more.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
    /// Stream offset of `buf[0]`.
    consumed: u64,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    pub fn next_message(&mut self) -> Result<Option<Message>, CodecError> {
        if self.buf.len() < HEADER_LEN {
            return Ok(None);
        }
        let declared = u32::from_be_bytes(self.buf[..HEADER_LEN].try_into().expect("4 bytes")) as usize;
        if declared > MAX_FRAME {
            return Err(CodecError::Oversize {
                declared,
                limit: MAX_FRAME,
            });
        }
        let end = HEADER_LEN + declared;
        if self.buf.len() < end {
            return Ok(None);
        }
        let base = self.consumed + HEADER_LEN as u64;
        let result = decode_payload(&self.buf[HEADER_LEN..end], base);
        self.buf.drain(..end);
        self.consumed += end as u64;
        result.map(Some)
    }
}
