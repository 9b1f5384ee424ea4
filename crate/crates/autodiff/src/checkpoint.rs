//! Tensor container: an 8-byte little-endian header length, a JSON header
//! (caller metadata plus a tensor directory), then every tensor's values as
//! little-endian `f64` in directory order.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

pub const FORMAT_NAME: &str = "vimu-tensors";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the data section, in values (not bytes).
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format: String,
    schema_version: u32,
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

pub fn write_tensors<W: Write>(mut out: W, metadata: &serde_json::Value, tensors: &[(&str, &Tensor)]) -> Result<()> {
    let mut offset = 0;
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: (*name).to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel();
    }
    let header = Header {
        format: FORMAT_NAME.to_string(),
        schema_version: SCHEMA_VERSION,
        metadata: metadata.clone(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&header)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    let mut buf = Vec::with_capacity(offset * 8);
    for (_, t) in tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_tensors<R: Read>(mut input: R) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 64 << 20 {
        return Err(AutodiffError::Format(format!("header length {len} is implausible")));
    }
    let mut json = vec![0u8; len];
    input.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    if header.format != FORMAT_NAME {
        return Err(AutodiffError::Format(format!("unknown format tag '{}'", header.format)));
    }
    if header.schema_version != SCHEMA_VERSION {
        return Err(AutodiffError::Format(format!(
            "unsupported schema version {}",
            header.schema_version
        )));
    }
    let mut body = Vec::new();
    input.read_to_end(&mut body)?;
    if body.len() % 8 != 0 {
        return Err(AutodiffError::Format(
            "data section is not a whole number of f64".into(),
        ));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut expected_offset = 0;
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        if e.offset != expected_offset || e.offset + n > values.len() {
            return Err(AutodiffError::Format(format!(
                "tensor '{}' at offset {} does not fit the data section",
                e.name, e.offset
            )));
        }
        expected_offset += n;
        let t = Tensor::new(e.shape, values[e.offset..e.offset + n].to_vec())?;
        tensors.push((e.name, t));
    }
    if expected_offset != values.len() {
        return Err(AutodiffError::Format(format!(
            "{} trailing values after the last tensor",
            values.len() - expected_offset
        )));
    }
    Ok((header.metadata, tensors))
}
