//! Tensor files: a JSON descriptor next to a raw little-endian payload.
//!
//! ```text
//! weight.json  {"shape": [64, 192], "dtype": "f64", "layout": "row-major"}
//! weight.bin   64·192·8 bytes
//! ```
//!
//! The payload length must equal `product(shape) × width` exactly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{QtError, Result};
use crate::tensor::{checked_numel, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    #[serde(rename = "row-major")]
    RowMajor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorDescriptor {
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub layout: Layout,
}

impl TensorDescriptor {
    pub fn numel(&self) -> Result<usize> {
        checked_numel(&self.shape)
    }

    /// Exact payload size in bytes.
    pub fn byte_len(&self) -> Result<usize> {
        self.numel()?
            .checked_mul(self.dtype.width())
            .ok_or_else(|| QtError::data("payload size overflows"))
    }
}

/// Parse and validate a descriptor.
pub fn parse_descriptor(bytes: &[u8]) -> Result<TensorDescriptor> {
    let desc: TensorDescriptor = serde_json::from_slice(bytes)?;
    desc.byte_len()?;
    Ok(desc)
}

/// Decode a payload against its descriptor.
pub fn decode_payload(desc: &TensorDescriptor, payload: &[u8]) -> Result<Tensor> {
    let expected = desc.byte_len()?;
    if payload.len() != expected {
        return Err(QtError::data(format!(
            "payload has {} bytes, descriptor {:?} needs {expected}",
            payload.len(),
            desc.shape
        )));
    }
    let data: Vec<f64> = match desc.dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    Tensor::new(desc.shape.clone(), data)
}

/// Descriptor JSON and payload bytes for `t`.
pub fn encode(t: &Tensor, dtype: Dtype) -> (String, Vec<u8>) {
    let desc = TensorDescriptor {
        shape: t.shape().to_vec(),
        dtype,
        layout: Layout::RowMajor,
    };
    let mut payload = Vec::with_capacity(t.len() * dtype.width());
    for &v in t.data() {
        match dtype {
            Dtype::F32 => payload.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => payload.extend_from_slice(&v.to_le_bytes()),
        }
    }
    (serde_json::to_string(&desc).expect("descriptor serializes"), payload)
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Write `<stem>.bin` and `<stem>.json`. `path` names the payload file.
pub fn write_tensor_file(path: &Path, t: &Tensor, dtype: Dtype) -> Result<()> {
    let (desc, payload) = encode(t, dtype);
    fs::write(sidecar(path), desc)?;
    fs::write(path, payload)?;
    Ok(())
}

/// Read a payload file and its sidecar descriptor.
pub fn read_tensor_file(path: &Path) -> Result<Tensor> {
    let desc = parse_descriptor(&fs::read(sidecar(path))?)?;
    decode_payload(&desc, &fs::read(path)?)
}
