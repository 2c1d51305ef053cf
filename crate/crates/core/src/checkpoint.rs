//! Tensor envelope used for backbone checkpoints and classifier-state
//! exports.
//!
//! Layout: one line of compact JSON (the header, terminated by `\n`),
//! followed by the tensors' values as little-endian `f32`, concatenated in
//! header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SvtError};
use crate::tensor::Matrix;

pub const FORMAT_NAME: &str = "svt-tensors";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeHeader {
    pub format: String,
    pub version: u32,
    /// `backbone` or `classifier`.
    pub kind: String,
    pub dtype: String,
    pub seed: u64,
    /// Echo of the configuration that produced the tensors.
    pub config: serde_json::Value,
    /// Kind-specific metadata (training epoch, prototype class ids, ...).
    #[serde(default)]
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

impl EnvelopeHeader {
    pub fn new(kind: &str, seed: u64, config: serde_json::Value, meta: serde_json::Value) -> Self {
        EnvelopeHeader {
            format: FORMAT_NAME.to_string(),
            version: FORMAT_VERSION,
            kind: kind.to_string(),
            dtype: "f32".to_string(),
            seed,
            config,
            meta,
            tensors: Vec::new(),
        }
    }
}

pub fn encode(mut header: EnvelopeHeader, tensors: &[(String, &Matrix)]) -> Result<Vec<u8>> {
    header.tensors = tensors
        .iter()
        .map(|(name, m)| TensorEntry {
            name: name.clone(),
            shape: [m.rows(), m.cols()],
        })
        .collect();
    let mut out = serde_json::to_vec(&header).map_err(|e| SvtError::Format(e.to_string()))?;
    out.push(b'\n');
    for (_, m) in tensors {
        for v in m.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(EnvelopeHeader, Vec<(String, Matrix)>)> {
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| SvtError::Format("missing header terminator".into()))?;
    let header: EnvelopeHeader = serde_json::from_slice(&bytes[..split])
        .map_err(|e| SvtError::Format(format!("header: {e}")))?;
    if header.format != FORMAT_NAME || header.version != FORMAT_VERSION {
        return Err(SvtError::Format(format!(
            "unsupported envelope {} v{}",
            header.format, header.version
        )));
    }
    if header.dtype != "f32" {
        return Err(SvtError::Format(format!("unsupported dtype {}", header.dtype)));
    }
    let mut payload = &bytes[split + 1..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let n = entry.shape[0] * entry.shape[1];
        if payload.len() < n * 4 {
            return Err(SvtError::Format(format!(
                "payload truncated inside tensor {}",
                entry.name
            )));
        }
        let values = payload[..n * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        payload = &payload[n * 4..];
        tensors.push((
            entry.name.clone(),
            Matrix::from_vec(entry.shape[0], entry.shape[1], values)?,
        ));
    }
    if !payload.is_empty() {
        return Err(SvtError::Format(format!(
            "{} trailing payload bytes",
            payload.len()
        )));
    }
    Ok((header, tensors))
}

/// Writes to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| SvtError::io(parent, e))?;
        }
    }
    let mut tmp_name = path.as_os_str().to_owned();
    tmp_name.push(".tmp");
    let tmp = Path::new(&tmp_name);
    let mut f = fs::File::create(tmp).map_err(|e| SvtError::io(tmp, e))?;
    f.write_all(bytes).map_err(|e| SvtError::io(tmp, e))?;
    f.sync_all().map_err(|e| SvtError::io(tmp, e))?;
    fs::rename(tmp, path).map_err(|e| SvtError::io(path, e))
}

pub fn write_envelope(
    path: &Path,
    header: EnvelopeHeader,
    tensors: &[(String, &Matrix)],
) -> Result<()> {
    write_atomic(path, &encode(header, tensors)?)
}

pub fn read_envelope(path: &Path) -> Result<(EnvelopeHeader, Vec<(String, Matrix)>)> {
    let bytes = fs::read(path).map_err(|e| SvtError::io(path, e))?;
    decode(&bytes)
}
