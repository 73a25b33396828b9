//! Flat binary tensor container.
//!
//! Layout: magic `JVT1`, one dtype byte, one rank byte, `rank` extents as
//! little-endian `u64`, then the raw little-endian elements.

use std::fs;
use std::path::Path;

use super::{Element, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"JVT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 1,
    F64 = 2,
}

impl DType {
    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(DType::F32),
            2 => Ok(DType::F64),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Encodes and decodes the container format.
pub struct TensorFile;

impl TensorFile {
    pub fn encode<T: Element>(t: &Tensor<T>) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + 8 * t.rank() + t.len() * T::DTYPE.size());
        out.extend_from_slice(MAGIC);
        out.push(T::DTYPE as u8);
        out.push(t.rank() as u8);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        out.extend_from_slice(&t.to_le_bytes());
        out
    }

    pub fn decode<T: Element>(bytes: &[u8]) -> Result<Tensor<T>> {
        if bytes.len() < 6 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing JVT1 magic".into()));
        }
        let dtype = DType::from_code(bytes[4])?;
        if dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "stored dtype {dtype:?} does not match requested {:?}",
                T::DTYPE
            )));
        }
        let rank = bytes[5] as usize;
        let header = 6 + 8 * rank;
        if bytes.len() < header {
            return Err(Error::Format("truncated header".into()));
        }
        let shape: Vec<usize> = bytes[6..header]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let count: usize = shape.iter().product();
        let body = &bytes[header..];
        if body.len() != count * dtype.size() {
            return Err(Error::Format(format!(
                "expected {} payload bytes, found {}",
                count * dtype.size(),
                body.len()
            )));
        }
        let data = body.chunks_exact(dtype.size()).map(T::read_le).collect();
        Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
    }
}

pub fn write_tensor<T: Element>(path: &Path, t: &Tensor<T>) -> Result<()> {
    fs::write(path, TensorFile::encode(t))?;
    Ok(())
}

pub fn read_tensor<T: Element>(path: &Path) -> Result<Tensor<T>> {
    TensorFile::decode(&fs::read(path)?)
}
