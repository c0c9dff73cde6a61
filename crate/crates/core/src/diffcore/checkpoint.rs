//! Parameter checkpoint container: plain-text header, raw little-endian f64
//! payload.
//!
//! ```text
//! OBJDRIVE-CKPT 1
//! tensors <count>
//! <name> <d0>[,<d1>...] <byte-offset-into-data>
//! ...
//! data
//! <raw LE f64 ...>
//! ```
//!
//! Tensors are ordered by name, offsets ascend, and the writer is fully
//! deterministic, so write -> read -> write is byte-identical.

use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::params::ParamSet;
use super::tensor::Tensor;

const MAGIC: &str = "OBJDRIVE-CKPT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: expected {MAGIC}")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed header line: {0:?}")]
    MalformedHeader(String),
    #[error("invalid tensor name {0:?} (must be non-empty printable ASCII without spaces)")]
    InvalidName(String),
    #[error("offset mismatch for tensor {name}: header says {header}, expected {expected}")]
    OffsetMismatch {
        name: String,
        header: u64,
        expected: u64,
    },
    #[error("payload truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("trailing bytes after payload: {0}")]
    TrailingBytes(usize),
    #[error("non-finite value in tensor {0}")]
    NonFinite(String),
}

fn valid_name(name: &str) -> bool {
    !name.is_empty() && name.bytes().all(|b| (0x21..=0x7e).contains(&b))
}

pub fn write<W: Write>(params: &ParamSet, mut out: W) -> Result<(), CheckpointError> {
    let mut header = String::new();
    header.push_str(&format!("{MAGIC} {VERSION}\n"));
    header.push_str(&format!("tensors {}\n", params.len()));
    let mut offset = 0u64;
    for (name, tensor) in params.iter() {
        if !valid_name(name) {
            return Err(CheckpointError::InvalidName(name.clone()));
        }
        let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
        header.push_str(&format!("{name} {} {offset}\n", dims.join(",")));
        offset += (tensor.len() * 8) as u64;
    }
    header.push_str("data\n");
    out.write_all(header.as_bytes())?;
    for (_, tensor) in params.iter() {
        for v in tensor.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read<R: Read>(mut input: R) -> Result<ParamSet, CheckpointError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    read_bytes(&bytes)
}

fn read_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str, CheckpointError> {
    let rest = &bytes[*pos..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CheckpointError::MalformedHeader("unterminated line".to_string()))?;
    let line = std::str::from_utf8(&rest[..end])
        .map_err(|_| CheckpointError::MalformedHeader("non-utf8 header".to_string()))?;
    *pos += end + 1;
    Ok(line)
}

pub fn read_bytes(bytes: &[u8]) -> Result<ParamSet, CheckpointError> {
    let mut pos = 0usize;
    let first = read_line(bytes, &mut pos)?;
    let mut it = first.split(' ');
    if it.next() != Some(MAGIC) {
        return Err(CheckpointError::BadMagic);
    }
    let version: u32 = it
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| CheckpointError::MalformedHeader(first.to_string()))?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count_line = read_line(bytes, &mut pos)?;
    let count: usize = count_line
        .strip_prefix("tensors ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| CheckpointError::MalformedHeader(count_line.to_string()))?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let line = read_line(bytes, &mut pos)?.to_string();
        let parts: Vec<&str> = line.split(' ').collect();
        if parts.len() != 3 {
            return Err(CheckpointError::MalformedHeader(line));
        }
        let name = parts[0].to_string();
        if !valid_name(&name) {
            return Err(CheckpointError::InvalidName(name));
        }
        let shape: Vec<usize> = parts[1]
            .split(',')
            .map(|d| d.parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| CheckpointError::MalformedHeader(line.clone()))?;
        let offset: u64 = parts[2]
            .parse()
            .map_err(|_| CheckpointError::MalformedHeader(line.clone()))?;
        entries.push((name, shape, offset));
    }
    let data_line = read_line(bytes, &mut pos)?;
    if data_line != "data" {
        return Err(CheckpointError::MalformedHeader(data_line.to_string()));
    }
    let payload = &bytes[pos..];
    let mut params = ParamSet::new();
    let mut expected_offset = 0u64;
    for (name, shape, offset) in entries {
        if offset != expected_offset {
            return Err(CheckpointError::OffsetMismatch {
                name,
                header: offset,
                expected: expected_offset,
            });
        }
        let count: usize = shape.iter().product();
        let nbytes = count * 8;
        let start = offset as usize;
        if payload.len() < start + nbytes {
            return Err(CheckpointError::Truncated {
                expected: start + nbytes,
                found: payload.len(),
            });
        }
        let mut data = Vec::with_capacity(count);
        for chunk in payload[start..start + nbytes].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(CheckpointError::NonFinite(name));
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| CheckpointError::MalformedHeader(e.to_string()))?;
        params.insert(name, tensor);
        expected_offset += nbytes as u64;
    }
    if payload.len() as u64 != expected_offset {
        return Err(CheckpointError::TrailingBytes(
            payload.len() - expected_offset as usize,
        ));
    }
    Ok(params)
}

pub fn write_file(params: &ParamSet, path: &Path) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    write(params, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<ParamSet, CheckpointError> {
    let bytes = std::fs::read(path)?;
    read_bytes(&bytes)
}
