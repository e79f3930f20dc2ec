//! On-disk formats shared by datasets and checkpoints.
//!
//! Tensor files: a 16-byte header (`b"SYNM"`, u32 format version, u32 dtype
//! code, u32 rank), then `rank` u32 dimensions, then the elements. All
//! integers and floats are little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nncore::{DType, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"SYNM";
pub const TENSOR_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

pub fn encode_tensor<T: Real>(tensor: &Tensor<T>, dtype: DType) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * tensor.shape().len() + dtype.size() * tensor.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.extend_from_slice(&dtype.code().to_le_bytes());
    out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        match dtype {
            DType::F32 => out.extend_from_slice(&(v.f64() as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&v.f64().to_le_bytes()),
        }
    }
    out
}

fn u32_at(bytes: &[u8], at: usize, field: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(field, "file truncated"))
}

/// Decodes a tensor file, converting the stored dtype to `T`.
pub fn decode_tensor<T: Real>(bytes: &[u8]) -> Result<(Tensor<T>, DType)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format("header", format!("expected {HEADER_LEN} bytes, found {}", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format("magic", format!("expected SYNM, found {:?}", &bytes[..4])));
    }
    let version = u32_at(bytes, 4, "version")?;
    if version != TENSOR_VERSION {
        return Err(Error::format("version", format!("unsupported version {version}")));
    }
    let code = u32_at(bytes, 8, "dtype")?;
    let dtype = DType::from_code(code).ok_or_else(|| Error::format("dtype", format!("unknown dtype code {code}")))?;
    let rank = u32_at(bytes, 12, "rank")? as usize;
    if rank > 8 {
        return Err(Error::format("rank", format!("rank {rank} exceeds 8")));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        shape.push(u32_at(bytes, HEADER_LEN + 4 * i, "dims")? as usize);
    }
    let count: usize = shape.iter().product();
    let start = HEADER_LEN + 4 * rank;
    let payload = &bytes[start..];
    if payload.len() != count * dtype.size() {
        return Err(Error::format(
            "data",
            format!("shape {shape:?} needs {} bytes, found {}", count * dtype.size(), payload.len()),
        ));
    }
    let data = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
            .collect(),
    };
    Ok((Tensor::new(shape, data)?, dtype))
}

pub fn write_tensor<T: Real>(path: &Path, tensor: &Tensor<T>, dtype: DType) -> Result<()> {
    write_atomic(path, &encode_tensor(tensor, dtype))
}

pub fn read_tensor<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
        .map(|(t, _)| t)
        .map_err(|e| match e {
            Error::Format { field, reason } => Error::format(field, format!("{}: {reason}", path.display())),
            other => other,
        })
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file_name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.{}.tmp", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<V: DeserializeOwned>(path: &Path) -> Result<V> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

/// Hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

/// Stable hash of a serialisable value (its compact JSON form).
pub fn hash_of<V: Serialize>(value: &V) -> String {
    let json = serde_json::to_vec(value).expect("serialisable value");
    sha256_hex(&json)[..16].to_string()
}
