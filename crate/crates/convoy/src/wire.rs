//! Binary wire format: length-prefixed frames over a reliable stream.
//!
//! Frame layout, all integers little-endian:
//!
//! ```text
//! magic "CVY1" (4) | version u8 | msg_type u8 | payload_len u64 | payload
//! ```
//!
//! Matrix payload layout:
//!
//! ```text
//! rows u32 | cols u32 | dtype u8 (0 = i64, 1 = f64) | rows*cols values, row-major
//! ```

use std::io::{self, Read, Write};

use crate::tensor::{Matrix, Scalar, TensorError};

pub const MAGIC: [u8; 4] = *b"CVY1";
pub const VERSION: u8 = 1;

const HEADER_LEN: usize = 4 + 1 + 1 + 8;
/// Sanity cap on a single frame; anything larger is treated as garbage.
const MAX_PAYLOAD: u64 = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    Hello = 0,
    ModelRequest = 1,
    ModelReply = 2,
    ComputeRequest = 3,
    ComputeReply = 4,
    Error = 5,
}

impl MsgType {
    pub fn from_u8(value: u8) -> Option<Self> {
        match value {
            0 => Some(MsgType::Hello),
            1 => Some(MsgType::ModelRequest),
            2 => Some(MsgType::ModelReply),
            3 => Some(MsgType::ComputeRequest),
            4 => Some(MsgType::ComputeReply),
            5 => Some(MsgType::Error),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireMessage {
    pub msg_type: MsgType,
    pub payload: Vec<u8>,
}

impl WireMessage {
    pub fn new(msg_type: MsgType, payload: Vec<u8>) -> Self {
        WireMessage { msg_type, payload }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated frame")]
    Truncated,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Serializes a message into one frame.
pub fn encode_message(msg: &WireMessage) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + msg.payload.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(msg.msg_type as u8);
    out.extend_from_slice(&(msg.payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&msg.payload);
    out
}

/// Parses exactly one frame from `bytes`. The buffer must contain the whole
/// frame and nothing else.
pub fn decode_message(bytes: &[u8]) -> Result<WireMessage, WireError> {
    if bytes.len() < HEADER_LEN {
        return Err(WireError::Truncated);
    }
    if bytes[0..4] != MAGIC {
        return Err(WireError::MalformedFrame("bad magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(WireError::UnsupportedVersion(bytes[4]));
    }
    let msg_type = MsgType::from_u8(bytes[5])
        .ok_or_else(|| WireError::MalformedFrame(format!("unknown message type {}", bytes[5])))?;
    let payload_len = u64::from_le_bytes(bytes[6..14].try_into().unwrap());
    if payload_len > MAX_PAYLOAD {
        return Err(WireError::MalformedFrame(format!(
            "payload length {payload_len} exceeds cap"
        )));
    }
    let total = HEADER_LEN + payload_len as usize;
    if bytes.len() < total {
        return Err(WireError::Truncated);
    }
    if bytes.len() > total {
        return Err(WireError::MalformedFrame("trailing bytes after frame".into()));
    }
    Ok(WireMessage {
        msg_type,
        payload: bytes[HEADER_LEN..].to_vec(),
    })
}

/// Reads one frame from a stream. Returns `Ok(None)` on clean end-of-stream
/// before any header byte.
pub fn read_message_opt(reader: &mut impl Read) -> Result<Option<WireMessage>, WireError> {
    let mut header = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        match reader.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(WireError::Truncated),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(WireError::Io(e)),
        }
    }
    if header[0..4] != MAGIC {
        return Err(WireError::MalformedFrame("bad magic".into()));
    }
    if header[4] != VERSION {
        return Err(WireError::UnsupportedVersion(header[4]));
    }
    let msg_type = MsgType::from_u8(header[5])
        .ok_or_else(|| WireError::MalformedFrame(format!("unknown message type {}", header[5])))?;
    let payload_len = u64::from_le_bytes(header[6..14].try_into().unwrap());
    if payload_len > MAX_PAYLOAD {
        return Err(WireError::MalformedFrame(format!(
            "payload length {payload_len} exceeds cap"
        )));
    }
    let mut payload = vec![0u8; payload_len as usize];
    reader.read_exact(&mut payload).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            WireError::Truncated
        } else {
            WireError::Io(e)
        }
    })?;
    Ok(Some(WireMessage { msg_type, payload }))
}

/// Reads one frame; end-of-stream is an error here.
pub fn read_message(reader: &mut impl Read) -> Result<WireMessage, WireError> {
    read_message_opt(reader)?.ok_or(WireError::Truncated)
}

pub fn write_message(writer: &mut impl Write, msg: &WireMessage) -> io::Result<()> {
    writer.write_all(&encode_message(msg))?;
    writer.flush()
}

/// Serializes a matrix in the wire layout (9-byte header plus 8 bytes per
/// value).
pub fn encode_matrix<T: Scalar>(m: &Matrix<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + 8 * m.data().len());
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    out.push(T::DTYPE);
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses a matrix from the front of `bytes`; returns the matrix and the
/// number of bytes consumed. Rejects a dtype tag that does not match `T`.
pub fn decode_matrix<T: Scalar>(bytes: &[u8]) -> Result<(Matrix<T>, usize), WireError> {
    if bytes.len() < 9 {
        return Err(WireError::Truncated);
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dtype = bytes[8];
    if dtype != T::DTYPE {
        return Err(WireError::MalformedFrame(format!(
            "dtype tag {dtype} does not match expected {}",
            T::DTYPE
        )));
    }
    if rows == 0 || cols == 0 {
        return Err(WireError::MalformedFrame("zero matrix dimension".into()));
    }
    let count = rows
        .checked_mul(cols)
        .filter(|&c| c as u64 * 8 <= MAX_PAYLOAD)
        .ok_or_else(|| WireError::MalformedFrame("matrix dimensions overflow".into()))?;
    let needed = 9 + 8 * count;
    if bytes.len() < needed {
        return Err(WireError::Truncated);
    }
    let data = bytes[9..needed]
        .chunks_exact(8)
        .map(|chunk| T::from_le_bytes(chunk.try_into().unwrap()))
        .collect();
    let matrix = Matrix::new(rows, cols, data).map_err(tensor_to_wire)?;
    Ok((matrix, needed))
}

fn tensor_to_wire(e: TensorError) -> WireError {
    WireError::MalformedFrame(e.to_string())
}

/// FNV-1a over a byte string; used as the model staleness hash.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
