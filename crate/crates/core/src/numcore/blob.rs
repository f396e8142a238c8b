use std::fs;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// On-disk container: a little-endian u32 header length, a JSON header, then
/// an opaque payload. The header always carries a "format" tag so readers
/// can reject files meant for another component.
#[derive(Debug, Clone)]
pub struct ContainerFile {
    pub header: Value,
    pub payload: Vec<u8>,
}

impl ContainerFile {
    pub fn tag(&self) -> Option<&str> {
        self.header.get("format").and_then(Value::as_str)
    }

    /// Fail unless the header's "format" tag matches.
    pub fn expect_tag(&self, tag: &str) -> Result<()> {
        match self.tag() {
            Some(t) if t == tag => Ok(()),
            Some(t) => {
                Err(Error::Format(format!("expected format tag {tag:?}, file has {t:?}")))
            }
            None => Err(Error::Format(format!(
                "expected format tag {tag:?}, file header has none"
            ))),
        }
    }
}

const MAX_HEADER_LEN: usize = 16 << 20;

fn encode(header: &Value) -> Result<Vec<u8>> {
    if header.get("format").and_then(Value::as_str).is_none() {
        return Err(Error::Format("container header must carry a string \"format\" tag".into()));
    }
    let hbytes = serde_json::to_vec(header)
        .map_err(|e| Error::Format(format!("header serialization failed: {e}")))?;
    if hbytes.len() > MAX_HEADER_LEN {
        return Err(Error::Format(format!("container header too large: {} bytes", hbytes.len())));
    }
    let mut out = Vec::with_capacity(4 + hbytes.len());
    out.extend_from_slice(&(hbytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&hbytes);
    Ok(out)
}

fn decode(bytes: &[u8], what: &str) -> Result<(Value, usize)> {
    if bytes.len() < 4 {
        return Err(Error::Format(format!("{what}: truncated before header length")));
    }
    let hlen = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    if hlen > MAX_HEADER_LEN || 4 + hlen > bytes.len() {
        return Err(Error::Format(format!(
            "{what}: header length {hlen} exceeds remaining {} bytes",
            bytes.len().saturating_sub(4)
        )));
    }
    let header: Value = serde_json::from_slice(&bytes[4..4 + hlen])
        .map_err(|e| Error::Format(format!("{what}: bad JSON header: {e}")))?;
    Ok((header, 4 + hlen))
}

pub fn write_container(path: &Path, header: &Value, payload: &[u8]) -> Result<()> {
    let mut bytes = encode(header)?;
    bytes.extend_from_slice(payload);
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    // Write-then-rename so an interrupted save never leaves a torn file at
    // the destination.
    let tmp = path.with_extension("tmp-write");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<ContainerFile> {
    let bytes = fs::read(path)?;
    let (header, consumed) = decode(&bytes, &path.display().to_string())?;
    Ok(ContainerFile { header, payload: bytes[consumed..].to_vec() })
}

/// Serialize one tensor as a nested blob: the same length-prefixed JSON
/// header layout with {"shape", "dtype"} followed by little-endian f64s in
/// row-major order. Blobs concatenate, so a payload can hold many tensors.
pub fn tensor_blob_bytes(t: &Tensor) -> Vec<u8> {
    let header = serde_json::json!({
        "format": "tensor-blob",
        "shape": t.shape(),
        "dtype": "f64",
    });
    let mut out = encode(&header).expect("static tensor header serializes");
    out.reserve(t.numel() * 8);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parse one tensor blob from the front of `bytes`; returns the tensor and
/// the number of bytes consumed so callers can walk a concatenated payload.
pub fn read_tensor_blob(bytes: &[u8]) -> Result<(Tensor, usize)> {
    let (header, consumed) = decode(bytes, "tensor blob")?;
    let dtype = header.get("dtype").and_then(Value::as_str).unwrap_or("");
    if dtype != "f64" {
        return Err(Error::Format(format!("tensor blob dtype {dtype:?}, expected \"f64\"")));
    }
    let shape: Vec<usize> = header
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Format("tensor blob header missing shape".into()))?
        .iter()
        .map(|v| {
            v.as_u64()
                .map(|u| u as usize)
                .ok_or_else(|| Error::Format(format!("bad shape entry {v}")))
        })
        .collect::<Result<_>>()?;
    let numel: usize = shape.iter().product();
    let need = numel * 8;
    let data_bytes = &bytes[consumed..];
    if data_bytes.len() < need {
        return Err(Error::Format(format!(
            "tensor blob shape {shape:?} needs {need} data bytes, {} remain",
            data_bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(numel);
    for chunk in data_bytes[..need].chunks_exact(8) {
        data.push(f64::from_le_bytes(chunk.try_into().expect("chunk of 8")));
    }
    Ok((Tensor::new(shape, data)?, consumed + need))
}
