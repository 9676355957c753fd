//! The `PPMT` tensor container.
//!
//! ```text
//! offset  size       field
//! 0       4          magic "PPMT"
//! 4       1          version (1)
//! 5       1          dtype (0 = f32, 1 = f64, 2 = u8)
//! 6       1          rank
//! 7       4 * rank   dims, u32 little-endian
//! ...     n * size   payload, row-major, little-endian
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"PPMT";
pub const VERSION: u8 = 1;

pub fn encode_tensor<T: Element>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 4 * t.rank() + t.numel() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE as u8);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

fn format_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        reason: reason.into(),
    }
}

struct Header {
    dtype: DType,
    shape: Vec<usize>,
    payload: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 4 {
        return Err(format_err(bytes.len(), "truncated magic"));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err(0, format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4]))));
    }
    let byte = |at: usize, what: &str| bytes.get(at).copied().ok_or_else(|| format_err(at, format!("truncated {what}")));
    let version = byte(4, "version")?;
    if version != VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let code = byte(5, "dtype")?;
    let dtype = DType::from_code(code).ok_or_else(|| format_err(5, format!("unknown dtype code {code}")))?;
    let rank = byte(6, "rank")? as usize;
    if rank == 0 {
        return Err(format_err(6, "rank 0 is not allowed"));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let at = 7 + 4 * i;
        let raw = bytes
            .get(at..at + 4)
            .ok_or_else(|| format_err(bytes.len(), format!("truncated dimension {i}")))?;
        let d = u32::from_le_bytes(raw.try_into().unwrap()) as usize;
        if d == 0 {
            return Err(format_err(at, format!("dimension {i} is zero")));
        }
        shape.push(d);
    }
    let payload = 7 + 4 * rank;
    let expected = shape
        .iter()
        .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| format_err(7, "payload size overflows"))?;
    let have = bytes.len() - payload;
    if have < expected {
        return Err(format_err(bytes.len(), format!("payload truncated: {have} of {expected} bytes")));
    }
    if have > expected {
        return Err(format_err(payload + expected, format!("{} trailing bytes", have - expected)));
    }
    Ok(Header { dtype, shape, payload })
}

/// Decode a container whose element type must be `T`.
pub fn decode_tensor<T: Element>(bytes: &[u8]) -> Result<Tensor<T>> {
    let h = parse_header(bytes)?;
    if h.dtype != T::DTYPE {
        return Err(format_err(5, format!("stored dtype {:?}, expected {:?}", h.dtype, T::DTYPE)));
    }
    let size = h.dtype.size();
    let data = bytes[h.payload..].chunks_exact(size).map(T::read_le).collect();
    Tensor::from_vec(&h.shape, data)
}

/// A decoded container of any element type.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U8(Tensor<u8>),
}

pub fn decode_any(bytes: &[u8]) -> Result<AnyTensor> {
    Ok(match parse_header(bytes)?.dtype {
        DType::F32 => AnyTensor::F32(decode_tensor(bytes)?),
        DType::F64 => AnyTensor::F64(decode_tensor(bytes)?),
        DType::U8 => AnyTensor::U8(decode_tensor(bytes)?),
    })
}

pub fn write_tensor<T: Element>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor<T: Element>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}
