//! Checkpoint files.
//!
//! Layout: an 8-byte little-endian header length `L`, `L` bytes of UTF-8
//! JSON, then the raw little-endian `f32` payload. The header lists every
//! tensor in sorted name order with its shape and byte offset into the
//! payload, plus the model configuration and free-form training metadata.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Result};
use crate::model::ModelConfig;
use crate::params::{ModelParams, ParamSpec};
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub schema_version: u32,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: usize,
    pub model: ModelConfig,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ModelParams<f32>,
    pub meta: serde_json::Value,
}

/// Serialises to bytes. Rejects non-finite values.
pub fn to_bytes(params: &ModelParams<f32>, model: &ModelConfig, meta: serde_json::Value) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(params.len());
    let mut offset = 0;
    for (name, t) in params.iter() {
        if !t.is_finite() {
            return Err(CheckpointError::NonFinite(name.clone()).into());
        }
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len() * 4;
    }
    let header = Header {
        schema_version: SCHEMA_VERSION,
        dtype: "f32le".into(),
        tensors,
        payload_bytes: offset,
        model: model.clone(),
        meta,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len() + offset);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save(path: &Path, params: &ModelParams<f32>, model: &ModelConfig, meta: serde_json::Value) -> Result<()> {
    let bytes = to_bytes(params, model, meta)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn corrupt(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::CorruptHeader(msg.into())
}

/// Parses and checks the header, without touching the payload.
pub fn read_header(bytes: &[u8]) -> Result<(Header, usize), CheckpointError> {
    let len_bytes: [u8; 8] = bytes
        .get(..8)
        .ok_or_else(|| corrupt("file shorter than the length prefix"))?
        .try_into()
        .expect("8 bytes");
    let len = u64::from_le_bytes(len_bytes);
    let end = 8usize
        .checked_add(usize::try_from(len).map_err(|_| corrupt("header length overflows"))?)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt(format!("header length {len} exceeds the file")))?;
    let header: Header = serde_json::from_slice(&bytes[8..end]).map_err(|e| corrupt(e.to_string()))?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(CheckpointError::Version(header.schema_version));
    }
    if header.dtype != "f32le" {
        return Err(corrupt(format!("unsupported dtype {}", header.dtype)));
    }
    let mut expected_offset = 0;
    for (i, t) in header.tensors.iter().enumerate() {
        if i > 0 && header.tensors[i - 1].name >= t.name {
            return Err(corrupt(format!("tensor names not sorted and unique at `{}`", t.name)));
        }
        if t.offset != expected_offset {
            return Err(corrupt(format!("tensor `{}` at offset {}, expected {expected_offset}", t.name, t.offset)));
        }
        expected_offset += t.shape.iter().product::<usize>() * 4;
    }
    if expected_offset != header.payload_bytes {
        return Err(corrupt("payload size disagrees with the tensor table"));
    }
    Ok((header, end))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let (header, start) = read_header(bytes)?;
    let payload = &bytes[start..];
    if payload.len() < header.payload_bytes {
        return Err(CheckpointError::Truncated {
            expected: header.payload_bytes,
            found: payload.len(),
        }
        .into());
    }
    if payload.len() > header.payload_bytes {
        return Err(corrupt(format!(
            "{} trailing bytes after the payload",
            payload.len() - header.payload_bytes
        ))
        .into());
    }
    let mut params = ModelParams::new();
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let data = payload[t.offset..t.offset + n * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        params.insert(t.name.clone(), Tensor::new(t.shape.clone(), data)?);
    }
    Ok(Checkpoint {
        model: header.model,
        params,
        meta: header.meta,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let ck = from_bytes(&bytes)?;
    check_params(&ck.params, &ck.model.param_specs())?;
    Ok(ck)
}

/// Compares loaded tensors with the layout a configuration expects.
pub fn check_params(params: &ModelParams<f32>, specs: &[ParamSpec]) -> Result<(), CheckpointError> {
    for spec in specs {
        let t = params
            .get(&spec.name)
            .ok_or_else(|| CheckpointError::MissingTensor(spec.name.clone()))?;
        if t.shape() != spec.shape {
            return Err(CheckpointError::ShapeMismatch {
                name: spec.name.clone(),
                expected: spec.shape.clone(),
                found: t.shape().to_vec(),
            });
        }
    }
    if params.len() != specs.len() {
        let known: std::collections::BTreeSet<&str> = specs.iter().map(|s| s.name.as_str()).collect();
        if let Some(extra) = params.names().find(|n| !known.contains(n.as_str())) {
            return Err(CheckpointError::UnexpectedTensor(extra.clone()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn fixture() -> (ModelConfig, ModelParams<f32>) {
        let cfg = ModelConfig::tiny();
        let p = cfg.init(3).unwrap();
        (cfg, p)
    }

    fn code(e: Error) -> i32 {
        match e {
            Error::Checkpoint(c) => c.code(),
            other => panic!("not a checkpoint error: {other}"),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (cfg, p) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save(&path, &p, &cfg, serde_json::json!({"epoch": 2})).unwrap();
        let ck = load(&path).unwrap();
        assert_eq!(ck.model, cfg);
        assert_eq!(ck.meta["epoch"], 2);
        for ((na, a), (nb, b)) in p.iter().zip(ck.params.iter()) {
            assert_eq!(na, nb);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn header_names_sorted_and_unique() {
        let (cfg, p) = fixture();
        let bytes = to_bytes(&p, &cfg, serde_json::Value::Null).unwrap();
        let (h, _) = read_header(&bytes).unwrap();
        assert!(h.tensors.windows(2).all(|w| w[0].name < w[1].name));
    }

    #[test]
    fn damage_gives_distinct_errors() {
        let (cfg, p) = fixture();
        let bytes = to_bytes(&p, &cfg, serde_json::Value::Null).unwrap();

        let truncated = &bytes[..bytes.len() - 1];
        assert_eq!(code(from_bytes(truncated).unwrap_err()), 11);

        let mut garbled = bytes.clone();
        garbled[10] = b'#';
        assert_eq!(code(from_bytes(&garbled).unwrap_err()), 10);

        assert_eq!(code(from_bytes(&bytes[..4]).unwrap_err()), 10);

        let mut other = ModelConfig::tiny();
        other.heads.hidden = vec![16, 4];
        let ck = from_bytes(&bytes).unwrap();
        let err = check_params(&ck.params, &other.param_specs()).unwrap_err();
        assert_eq!(err.code(), 12);

        let mut extra = p.clone();
        extra.insert("zzz", Tensor::zeros([1]));
        let err = check_params(&extra, &cfg.param_specs()).unwrap_err();
        assert_eq!(err.code(), 14);

        let mut missing = ModelParams::new();
        missing.insert("bcn.stem.bias", p.get("bcn.stem.bias").unwrap().clone());
        assert_eq!(check_params(&missing, &cfg.param_specs()).unwrap_err().code(), 13);
    }

    #[test]
    fn version_and_non_finite_rejected() {
        let (cfg, mut p) = fixture();
        let bytes = to_bytes(&p, &cfg, serde_json::Value::Null).unwrap();
        let text = String::from_utf8_lossy(&bytes[8..]).replacen("\"schema_version\":1", "\"schema_version\":9", 1);
        let mut bumped = bytes[..8].to_vec();
        bumped.extend_from_slice(text.as_bytes());
        assert_eq!(code(from_bytes(&bumped).unwrap_err()), 15);

        p.get_mut("bcn.stem.bias").unwrap().data_mut()[0] = f32::NAN;
        assert_eq!(code(to_bytes(&p, &cfg, serde_json::Value::Null).unwrap_err()), 16);
    }
}
