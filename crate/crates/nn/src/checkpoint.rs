//! Checkpoint files: one line of JSON header, then raw little-endian `f32`
//! arrays in declaration order.
//!
//! ```text
//! {"format":"echoqa-checkpoint","version":1,"meta":{..},"tensors":[{"name":..,"shape":[..],"offset":0,"len":..},..]}\n
//! <f32 LE bytes ...>
//! ```
//!
//! `offset` and `len` count bytes from the first byte after the newline.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::tensor::{Real, Tensor};

pub const FORMAT: &str = "echoqa-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Decoded checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// Serializes named tensors (converted to `f32`) with a metadata blob.
pub fn encode<T: Real>(meta: &serde_json::Value, tensors: &[(&str, &Tensor<T>)]) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in tensors {
        let len = t.len() * 4;
        entries.push(TensorEntry {
            name: (*name).to_string(),
            shape: t.shape().to_vec(),
            offset,
            len,
        });
        offset += len;
    }
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        meta: meta.clone(),
        tensors: entries,
    };
    let mut out = serde_json::to_vec(&header).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    out.push(b'\n');
    out.reserve(offset);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| NnError::Checkpoint("missing header line".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| NnError::Checkpoint(format!("bad header: {e}")))?;
    if header.format != FORMAT {
        return Err(NnError::Checkpoint(format!(
            "unexpected format `{}`",
            header.format
        )));
    }
    if header.version != VERSION {
        return Err(NnError::Checkpoint(format!(
            "unsupported checkpoint version {} (expected {VERSION})",
            header.version
        )));
    }
    let body = &bytes[newline + 1..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let count: usize = e.shape.iter().product();
        if e.len != count * 4 || e.offset + e.len > body.len() {
            return Err(NnError::Checkpoint(format!(
                "tensor `{}` extent does not fit the file",
                e.name
            )));
        }
        let data = body[e.offset..e.offset + e.len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    Ok(Checkpoint {
        meta: header.meta,
        tensors,
    })
}

pub fn save<T: Real>(
    path: impl AsRef<Path>,
    meta: &serde_json::Value,
    tensors: &[(&str, &Tensor<T>)],
) -> Result<()> {
    let bytes = encode(meta, tensors)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}
