//! The `.ten` binary tensor format.
//!
//! Layout, all little-endian:
//!
//! | bytes        | content                                  |
//! |--------------|------------------------------------------|
//! | 4            | magic `UPLT`                             |
//! | 1            | version `0x01`                           |
//! | 1            | dtype `0x00` (IEEE-754 binary32)         |
//! | 1            | ndim                                     |
//! | 4 × ndim     | dims as `u32`                            |
//! | 4 × numel    | row-major payload                        |

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"UPLT";
pub const VERSION: u8 = 0x01;
pub const DTYPE_F32: u8 = 0x00;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 4 * t.ndim() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F32);
    out.push(u8::try_from(t.ndim()).expect("rank fits in a byte"));
    for &d in t.shape() {
        out.extend_from_slice(&u32::try_from(d).expect("dim fits in u32").to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes one tensor from the front of `bytes`, returning it and the
/// number of bytes consumed.
pub fn decode_prefix(bytes: &[u8]) -> Result<(Tensor, usize)> {
    if bytes.len() < 7 {
        return Err(Error::Format("header truncated".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", bytes[4])));
    }
    if bytes[5] != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype {}", bytes[5])));
    }
    let ndim = bytes[6] as usize;
    let mut pos = 7;
    if bytes.len() < pos + 4 * ndim {
        return Err(Error::Format("dims truncated".into()));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let d = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
        shape.push(d as usize);
        pos += 4;
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("shape overflows".into()))?;
    let payload = numel
        .checked_mul(4)
        .ok_or_else(|| Error::Format("shape overflows".into()))?;
    if bytes.len() - pos < payload {
        return Err(Error::Format(format!(
            "payload truncated: need {payload} bytes, have {}",
            bytes.len() - pos
        )));
    }
    let data = bytes[pos..pos + payload]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((Tensor::new(shape, data)?, pos + payload))
}

/// Decodes a buffer holding exactly one tensor.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let (t, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            bytes.len() - used
        )));
    }
    Ok(t)
}

pub fn write(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor> {
    decode(&fs::read(path)?)
}
