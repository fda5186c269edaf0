//! Binary checkpoints: an 8-byte magic, a little-endian `u64` header length,
//! a JSON header (names, shapes, dtype, step, config hash), then every tensor
//! as raw little-endian scalars in header order.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numerics::{Scalar, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"FFTATCK1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Checkpoint metadata; `extra` carries caller-defined fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub dtype: String,
    pub step: u64,
    pub config_hash: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn save<T: Scalar>(
    path: impl AsRef<Path>,
    step: u64,
    config_hash: &str,
    extra: serde_json::Value,
    tensors: &[(&str, &Tensor<T>)],
) -> Result<()> {
    let header = Header {
        dtype: T::NAME.to_string(),
        step,
        config_hash: config_hash.to_string(),
        tensors: tensors
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        extra,
    };
    let json = serde_json::to_vec(&header)?;
    let path = path.as_ref();
    let mut w = BufWriter::new(fs::File::create(path).map_err(|e| Error::File {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?);
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::new();
    for (_, t) in tensors {
        buf.clear();
        for &v in t.data() {
            v.write_le(&mut buf);
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

/// Named tensors in checkpoint order.
pub type Entries<T> = Vec<(String, Tensor<T>)>;

/// Reads a checkpoint written with scalar type `T`.
pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<(Header, Entries<T>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::File {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    if header.dtype != T::NAME {
        return Err(bad(&format!("stored as {}, requested {}", header.dtype, T::NAME)));
    }
    let mut pos = 16 + hlen;
    let mut out = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let raw = bytes
            .get(pos..pos + n * T::BYTES)
            .ok_or_else(|| bad(&format!("truncated data for {}", entry.name)))?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        out.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
        pos += n * T::BYTES;
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after the last tensor"));
    }
    Ok((header, out))
}
