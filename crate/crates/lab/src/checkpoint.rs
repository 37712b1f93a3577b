//! The `TVL1` container: magic, little-endian `u32` header length, a JSON
//! header with an ordered `(name, shape)` manifest, then the little-endian
//! `f32` arrays in manifest order. Models and task-vector sets share it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tvlab_core::analysis::VectorSet;
use tvlab_core::hypothesis::{TaskVector, VectorSource};
use tvlab_core::{ModelConfig, Tensor, TransformerModel};

use crate::error::{LabError, Result};
use crate::run::write_atomic;

pub const MAGIC: &[u8; 4] = b"TVL1";
pub const KIND_MODEL: &str = "model";
pub const KIND_TASK_VECTORS: &str = "task_vectors";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    /// Per-vector provenance for task-vector sets, in manifest order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sources: Vec<VectorSource>,
    pub manifest: Vec<(String, Vec<usize>)>,
}

pub fn encode(header: &Header, arrays: &[&[f32]]) -> Result<Vec<u8>> {
    if header.manifest.len() != arrays.len() {
        return Err(LabError::Core(tvlab_core::Error::Contract(format!(
            "manifest lists {} arrays, {} given",
            header.manifest.len(),
            arrays.len()
        ))));
    }
    for ((name, shape), a) in header.manifest.iter().zip(arrays) {
        if shape.iter().product::<usize>() != a.len() {
            return Err(LabError::Core(tvlab_core::Error::Contract(format!(
                "{name}: shape {shape:?} does not hold {} values",
                a.len()
            ))));
        }
    }
    let json = serde_json::to_vec(header).expect("header serializes");
    let header_len = u32::try_from(json.len()).map_err(|_| {
        LabError::Core(tvlab_core::Error::Contract("header exceeds 4 GiB".into()))
    })?;
    let floats: usize = arrays.iter().map(|a| a.len()).sum();
    let mut out = Vec::with_capacity(8 + json.len() + 4 * floats);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    for a in arrays {
        for v in *a {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a container; `path` only labels errors.
pub fn decode(path: &Path, bytes: &[u8]) -> Result<(Header, Vec<Vec<f32>>)> {
    let fail = |offset: usize, message: String| LabError::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    };
    if bytes.len() < 4 {
        return Err(fail(bytes.len(), "truncated before magic".into()));
    }
    if &bytes[..4] != MAGIC {
        if bytes[..3] == MAGIC[..3] {
            return Err(fail(3, format!("unsupported format version {:?}", bytes[3] as char)));
        }
        return Err(fail(0, "bad magic, expected \"TVL1\"".into()));
    }
    if bytes.len() < 8 {
        return Err(fail(bytes.len(), "truncated header length".into()));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let data_start = 8usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| fail(bytes.len(), format!("header of {header_len} bytes runs past end of file")))?;
    let header: Header = serde_json::from_slice(&bytes[8..data_start])
        .map_err(|e| fail(8, format!("header: {e}")))?;
    let mut expected = 0usize;
    for (name, shape) in &header.manifest {
        expected = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(expected))
            .ok_or_else(|| fail(8, format!("{name}: shape {shape:?} overflows")))?;
    }
    let payload = &bytes[data_start..];
    if payload.len() < expected {
        return Err(fail(
            bytes.len(),
            format!("truncated data: manifest needs {expected} bytes, {} present", payload.len()),
        ));
    }
    if payload.len() > expected {
        return Err(fail(data_start + expected, "trailing bytes after last array".into()));
    }
    let mut arrays = Vec::with_capacity(header.manifest.len());
    let mut chunks = payload.chunks_exact(4);
    for (_, shape) in &header.manifest {
        let n: usize = shape.iter().product();
        arrays.push(
            chunks
                .by_ref()
                .take(n)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        );
    }
    Ok((header, arrays))
}

pub fn encode_model(model: &TransformerModel) -> Result<Vec<u8>> {
    let named = model.named_parameters();
    let header = Header {
        kind: KIND_MODEL.into(),
        config: Some(model.config().clone()),
        layer: None,
        sources: Vec::new(),
        manifest: named.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect(),
    };
    let arrays: Vec<&[f32]> = named.iter().map(|(_, t)| t.data()).collect();
    encode(&header, &arrays)
}

pub fn decode_model(path: &Path, bytes: &[u8]) -> Result<TransformerModel> {
    let (header, arrays) = decode(path, bytes)?;
    if header.kind != KIND_MODEL {
        return Err(LabError::Format {
            path: path.to_path_buf(),
            offset: 8,
            message: format!("expected a {KIND_MODEL} container, found {}", header.kind),
        });
    }
    let config = header.config.ok_or_else(|| LabError::Format {
        path: path.to_path_buf(),
        offset: 8,
        message: "model header has no config".into(),
    })?;
    if header.manifest != config.manifest() {
        return Err(LabError::Format {
            path: path.to_path_buf(),
            offset: 8,
            message: "parameter manifest does not match config".into(),
        });
    }
    let tensors = header
        .manifest
        .into_iter()
        .zip(arrays)
        .map(|((name, shape), data)| Ok((name, Tensor::new(shape, data)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(TransformerModel::from_named_tensors(config, tensors)?)
}

pub fn save_checkpoint(model: &TransformerModel, path: &Path) -> Result<Vec<u8>> {
    let bytes = encode_model(model)?;
    write_atomic(path, &bytes)?;
    Ok(bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<TransformerModel> {
    let bytes = std::fs::read(path).map_err(|e| LabError::io(path, e))?;
    decode_model(path, &bytes)
}

/// Entries are named `theta/{task}/{index}`, index counting within the task.
pub fn encode_task_vectors(set: &VectorSet) -> Result<Vec<u8>> {
    let mut manifest = Vec::with_capacity(set.vectors.len());
    let mut counts: Vec<(&str, usize)> = Vec::new();
    for tv in &set.vectors {
        let index = match counts.iter_mut().find(|(t, _)| *t == tv.task) {
            Some((_, n)) => {
                *n += 1;
                *n - 1
            }
            None => {
                counts.push((&tv.task, 1));
                0
            }
        };
        manifest.push((format!("theta/{}/{index}", tv.task), vec![tv.theta.len()]));
    }
    let header = Header {
        kind: KIND_TASK_VECTORS.into(),
        config: None,
        layer: Some(set.layer),
        sources: set.vectors.iter().map(|tv| tv.source.clone()).collect(),
        manifest,
    };
    let arrays: Vec<&[f32]> = set.vectors.iter().map(|tv| tv.theta.as_slice()).collect();
    encode(&header, &arrays)
}

pub fn decode_task_vectors(path: &Path, bytes: &[u8]) -> Result<VectorSet> {
    let (header, arrays) = decode(path, bytes)?;
    let bad = |message: String| LabError::Format {
        path: path.to_path_buf(),
        offset: 8,
        message,
    };
    if header.kind != KIND_TASK_VECTORS {
        return Err(bad(format!("expected a {KIND_TASK_VECTORS} container, found {}", header.kind)));
    }
    let layer = header.layer.ok_or_else(|| bad("task-vector header has no layer".into()))?;
    if header.sources.len() != header.manifest.len() {
        return Err(bad("sources and manifest differ in length".into()));
    }
    let mut vectors = Vec::with_capacity(arrays.len());
    for (((name, _), theta), source) in header.manifest.into_iter().zip(arrays).zip(header.sources) {
        let task = name
            .strip_prefix("theta/")
            .and_then(|rest| rest.rsplit_once('/'))
            .map(|(task, _)| task.to_string())
            .ok_or_else(|| bad(format!("entry {name} is not theta/{{task}}/{{index}}")))?;
        vectors.push(TaskVector {
            theta,
            layer,
            task,
            source,
        });
    }
    Ok(VectorSet::new(vectors)?)
}
