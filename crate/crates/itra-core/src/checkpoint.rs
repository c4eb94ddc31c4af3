//! Model checkpoint container: named float64 tensors behind a JSON header.
//!
//! Layout, all little-endian:
//!
//! ```text
//! bytes 0..5    magic "ITRA1"
//! bytes 5..13   u64 header length L
//! bytes 13..13+L JSON header: model spec plus one (name, shape, offset)
//!                entry per tensor; offsets count bytes from payload start
//! bytes 13+L..  payload, f64 values in entry order
//! ```
//!
//! A checkpoint stores the parameter tensors and normalization running
//! statistics. Momentum buffers are transient optimizer state and are not
//! persisted; a loaded set starts with zero velocity.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{init_params, ModelSpec, ParamSet};
use crate::tensor::Tensor;

const MAGIC: &[u8; 5] = b"ITRA1";

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelSpec,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

fn fmt_err(path: &Path, offset: u64, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        offset,
        msg: msg.into(),
    }
}

/// Serializes the parameters and running statistics to `path`.
pub fn save_checkpoint(path: &Path, spec: &ModelSpec, params: &ParamSet) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut put = |entries: &mut Vec<Entry>, name: String, shape: Vec<usize>, data: &[f64]| {
        entries.push(Entry {
            name,
            shape,
            offset: payload.len() as u64,
        });
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (name, tensor) in params.names.iter().zip(&params.tensors) {
        put(&mut entries, name.clone(), tensor.shape().to_vec(), tensor.data());
    }
    for bn in &params.bn {
        put(
            &mut entries,
            format!("{}.running_mean", bn.name),
            vec![bn.mean.len()],
            &bn.mean,
        );
        put(
            &mut entries,
            format!("{}.running_var", bn.name),
            vec![bn.var.len()],
            &bn.var,
        );
    }
    let header = Header {
        model: spec.clone(),
        tensors: entries,
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| Error::Config(format!("header encode: {e}")))?;
    let mut out = Vec::with_capacity(13 + header_bytes.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&payload);
    fs::write(path, out)?;
    Ok(())
}

/// Reads a checkpoint back into a model spec and parameter set. The tensor
/// inventory must exactly match what [`save_checkpoint`] writes for that
/// spec; anything missing, extra or misshapen is a format error.
pub fn load_checkpoint(path: &Path) -> Result<(ModelSpec, ParamSet)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 13 || &bytes[..5] != MAGIC {
        return Err(fmt_err(path, 0, "missing ITRA1 magic"));
    }
    let header_len = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
    let payload_start = 13usize.checked_add(header_len).filter(|&p| p <= bytes.len());
    let Some(payload_start) = payload_start else {
        return Err(fmt_err(
            path,
            5,
            format!("header length {header_len} overruns file of {} bytes", bytes.len()),
        ));
    };
    let header: Header = serde_json::from_slice(&bytes[13..payload_start])
        .map_err(|e| fmt_err(path, 13, format!("header JSON: {e}")))?;
    let payload = &bytes[payload_start..];

    let read_tensor = |entry: &Entry| -> Result<Tensor> {
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + n * 8;
        if end > payload.len() {
            return Err(fmt_err(
                path,
                (payload_start + start) as u64,
                format!(
                    "tensor {} needs {} payload bytes, {} available",
                    entry.name,
                    n * 8,
                    payload.len().saturating_sub(start)
                ),
            ));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(entry.shape.clone(), data)
            .map_err(|e| fmt_err(path, (payload_start + start) as u64, e.to_string()))
    };

    // Rebuild against a reference layout for the declared spec so the
    // loaded set is guaranteed to drive the forward pass correctly.
    let mut params = init_params(&header.model, 0)
        .map_err(|e| fmt_err(path, 13, format!("header model spec: {e}")))?;
    for v in params.velocity.iter_mut() {
        for x in v.data_mut() {
            *x = 0.0;
        }
    }
    let mut expected: Vec<(String, Vec<usize>)> = params
        .names
        .iter()
        .zip(&params.tensors)
        .map(|(n, t)| (n.clone(), t.shape().to_vec()))
        .collect();
    for bn in &params.bn {
        expected.push((format!("{}.running_mean", bn.name), vec![bn.mean.len()]));
        expected.push((format!("{}.running_var", bn.name), vec![bn.var.len()]));
    }
    if header.tensors.len() != expected.len() {
        return Err(fmt_err(
            path,
            13,
            format!(
                "spec calls for {} tensors, header lists {}",
                expected.len(),
                header.tensors.len()
            ),
        ));
    }
    for (entry, (name, shape)) in header.tensors.iter().zip(&expected) {
        if &entry.name != name || &entry.shape != shape {
            return Err(fmt_err(
                path,
                13,
                format!(
                    "expected tensor {name} with shape {shape:?}, found {} with {:?}",
                    entry.name, entry.shape
                ),
            ));
        }
    }
    let n_params = params.names.len();
    for (i, entry) in header.tensors[..n_params].iter().enumerate() {
        params.tensors[i] = read_tensor(entry)?;
    }
    for (i, pair) in header.tensors[n_params..].chunks_exact(2).enumerate() {
        params.bn[i].mean = read_tensor(&pair[0])?.data().to_vec();
        params.bn[i].var = read_tensor(&pair[1])?.data().to_vec();
    }
    Ok((header.model, params))
}

// ---------------------------------------------------------------------------
