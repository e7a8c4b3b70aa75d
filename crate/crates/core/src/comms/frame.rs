//! The `VFL1` frame format.
//!
//! ```text
//! "VFL1" | u32 LE header length H | H bytes JSON header | payload
//! ```
//!
//! The header carries `{method, sender, receiver, seq, meta, tensors, blobs}`.
//! Tensor and blob entries give offsets relative to the start of the
//! payload. The payload holds every tensor (row-major little-endian `f64`)
//! followed by every blob, in header order, without padding.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Message, PartyId, MAX_METHOD_BYTES};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"VFL1";
pub const MAX_HEADER_BYTES: usize = 16 << 20;
pub const MAX_PAYLOAD_BYTES: usize = 1 << 30;
const PREFIX: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FrameError {
    #[error("bad magic {found:02x?} at offset 0")]
    BadMagic { found: Vec<u8> },
    #[error("frame truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("{extra} trailing bytes after frame end at offset {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("header too large: {0} bytes")]
    HeaderTooLarge(usize),
    #[error("payload too large: {0} bytes")]
    PayloadTooLarge(usize),
    #[error("invalid header at offset {offset}: {reason}")]
    Header { offset: usize, reason: String },
    #[error("non-finite float in tensor '{name}' at offset {offset}")]
    NonFinite { name: String, offset: usize },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    method: String,
    sender: PartyId,
    receiver: PartyId,
    seq: u64,
    meta: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
    blobs: Vec<BlobEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
    nbytes: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobEntry {
    name: String,
    offset: usize,
    nbytes: usize,
}

pub fn encode_frame(msg: &Message) -> Result<Vec<u8>, FrameError> {
    let mut offset = 0usize;
    let mut tensors = Vec::with_capacity(msg.tensors.len());
    for (name, t) in &msg.tensors {
        let nbytes = t.data().len() * 8;
        tensors.push(TensorEntry {
            name: name.clone(),
            rows: t.rows(),
            cols: t.cols(),
            offset,
            nbytes,
        });
        offset += nbytes;
    }
    let mut blobs = Vec::with_capacity(msg.blobs.len());
    for (name, b) in &msg.blobs {
        blobs.push(BlobEntry {
            name: name.clone(),
            offset,
            nbytes: b.len(),
        });
        offset += b.len();
    }
    if offset > MAX_PAYLOAD_BYTES {
        return Err(FrameError::PayloadTooLarge(offset));
    }
    let header = Header {
        method: msg.method.clone(),
        sender: msg.sender,
        receiver: msg.receiver,
        seq: msg.seq,
        meta: msg.meta.clone(),
        tensors,
        blobs,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    if header.len() > MAX_HEADER_BYTES {
        return Err(FrameError::HeaderTooLarge(header.len()));
    }

    let mut out = Vec::with_capacity(PREFIX + header.len() + offset);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for t in msg.tensors.values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for b in msg.blobs.values() {
        out.extend_from_slice(b);
    }
    Ok(out)
}

/// Reads the header length from the 8-byte prefix, checking the magic.
pub(crate) fn header_len(prefix: &[u8]) -> Result<usize, FrameError> {
    if prefix.len() < 4 || prefix[..4] != MAGIC {
        if prefix.len() < 4 && MAGIC.starts_with(prefix) {
            return Err(FrameError::Truncated {
                needed: PREFIX,
                have: prefix.len(),
            });
        }
        return Err(FrameError::BadMagic {
            found: prefix[..prefix.len().min(4)].to_vec(),
        });
    }
    if prefix.len() < PREFIX {
        return Err(FrameError::Truncated {
            needed: PREFIX,
            have: prefix.len(),
        });
    }
    let h = u32::from_le_bytes(prefix[4..8].try_into().unwrap()) as usize;
    if h > MAX_HEADER_BYTES {
        return Err(FrameError::HeaderTooLarge(h));
    }
    Ok(h)
}

/// Total payload length declared by a header, after validating that the
/// entries tile the payload contiguously in header order.
fn payload_layout(header: &Header) -> Result<usize, FrameError> {
    let bad = |reason: String| FrameError::Header {
        offset: PREFIX,
        reason,
    };
    let mut expected = 0usize;
    for t in &header.tensors {
        let nbytes = t
            .rows
            .checked_mul(t.cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| bad(format!("tensor '{}' shape overflows", t.name)))?;
        if t.nbytes != nbytes || t.offset != expected {
            return Err(bad(format!("tensor '{}' has inconsistent offset/nbytes", t.name)));
        }
        expected = expected
            .checked_add(nbytes)
            .ok_or_else(|| bad("payload length overflows".into()))?;
    }
    for b in &header.blobs {
        if b.offset != expected {
            return Err(bad(format!("blob '{}' has inconsistent offset", b.name)));
        }
        expected = expected
            .checked_add(b.nbytes)
            .ok_or_else(|| bad("payload length overflows".into()))?;
    }
    if expected > MAX_PAYLOAD_BYTES {
        return Err(FrameError::PayloadTooLarge(expected));
    }
    Ok(expected)
}

/// Number of payload bytes that follow a header, used by stream readers.
pub(crate) fn declared_payload_len(header_bytes: &[u8]) -> Result<usize, FrameError> {
    let header = parse_header(header_bytes)?;
    payload_layout(&header)
}

fn parse_header(bytes: &[u8]) -> Result<Header, FrameError> {
    let header: Header = serde_json::from_slice(bytes).map_err(|e| FrameError::Header {
        offset: PREFIX + e.column().saturating_sub(1),
        reason: e.to_string(),
    })?;
    if header.method.is_empty() || header.method.len() > MAX_METHOD_BYTES || !header.method.is_ascii() {
        return Err(FrameError::Header {
            offset: PREFIX,
            reason: format!("bad method tag {:?}", header.method),
        });
    }
    Ok(header)
}

pub fn decode_frame(b: &[u8]) -> Result<Message, FrameError> {
    let h = header_len(&b[..b.len().min(PREFIX)])?;
    let header_end = PREFIX + h;
    if b.len() < header_end {
        return Err(FrameError::Truncated {
            needed: header_end,
            have: b.len(),
        });
    }
    let header = parse_header(&b[PREFIX..header_end])?;
    let payload_len = payload_layout(&header)?;
    let end = header_end + payload_len;
    if b.len() < end {
        return Err(FrameError::Truncated {
            needed: end,
            have: b.len(),
        });
    }
    if b.len() > end {
        return Err(FrameError::TrailingBytes {
            offset: end,
            extra: b.len() - end,
        });
    }

    let payload = &b[header_end..end];
    let mut tensors = BTreeMap::new();
    for t in header.tensors {
        let bytes = &payload[t.offset..t.offset + t.nbytes];
        let mut data = Vec::with_capacity(t.rows * t.cols);
        for (i, chunk) in bytes.chunks_exact(8).enumerate() {
            let v = f64::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(FrameError::NonFinite {
                    name: t.name,
                    offset: header_end + t.offset + i * 8,
                });
            }
            data.push(v);
        }
        let tensor = Tensor::new(t.rows, t.cols, data).expect("length checked by layout");
        if tensors.insert(t.name.clone(), tensor).is_some() {
            return Err(FrameError::Header {
                offset: PREFIX,
                reason: format!("duplicate tensor name '{}'", t.name),
            });
        }
    }
    let mut blobs = BTreeMap::new();
    for e in header.blobs {
        let bytes = payload[e.offset..e.offset + e.nbytes].to_vec();
        if blobs.insert(e.name.clone(), bytes).is_some() {
            return Err(FrameError::Header {
                offset: PREFIX,
                reason: format!("duplicate blob name '{}'", e.name),
            });
        }
    }
    Ok(Message {
        method: header.method,
        sender: header.sender,
        receiver: header.receiver,
        seq: header.seq,
        tensors,
        blobs,
        meta: header.meta,
    })
}
