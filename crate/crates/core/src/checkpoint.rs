//! Single-file checkpoint archive.
//!
//! Layout: an 8-byte little-endian header length, the JSON header
//! `{"tensors": [{"name", "shape", "dtype": "f64", "offset"}], "config", "step"}`,
//! then the tensor payloads as little-endian `f64`. Offsets are in bytes from
//! the start of the payload section.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MuseError, Result};
use crate::model::{init_params, ModelConfig, Params};
use crate::numerics::{SeededRng, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorEntry>,
    config: ModelConfig,
    step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: Params,
    pub config: ModelConfig,
    pub step: u64,
}

pub fn to_bytes(params: &Params, config: &ModelConfig, step: u64) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(params.len());
    let mut offset = 0u64;
    for (name, t) in params.iter() {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f64".into(),
            offset,
        });
        offset += 8 * t.len() as u64;
    }
    let header = Header { tensors, config: config.clone(), step };
    let json = serde_json::to_vec(&header).map_err(|e| MuseError::config(e.to_string()))?;
    let mut out = Vec::with_capacity(8 + json.len() + offset as usize);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let bad = |msg: String| MuseError::Decode { path: path.to_path_buf(), msg };
    if bytes.len() < 8 {
        return Err(bad("truncated header length".into()));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(e.to_string()))?;
    let payload = &bytes[8 + hlen..];
    let mut params = Params::new();
    for e in header.tensors {
        if e.dtype != "f64" {
            return Err(bad(format!("unsupported dtype {} for {}", e.dtype, e.name)));
        }
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let raw = payload
            .get(start..start + 8 * n)
            .ok_or_else(|| bad(format!("payload of {} out of range", e.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(e.name, Tensor::new(e.shape, data)?)?;
    }
    Ok(Checkpoint { params, config: header.config, step: header.step })
}

pub fn save(path: &Path, params: &Params, config: &ModelConfig, step: u64) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| MuseError::io(dir, e))?;
    }
    fs::write(path, to_bytes(params, config, step)?).map_err(|e| MuseError::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| MuseError::io(path, e))?;
    from_bytes(&bytes, path)
}

/// Load and verify that every tensor matches the layout `config` produces.
pub fn load_for(path: &Path, config: &ModelConfig) -> Result<Checkpoint> {
    let ck = load(path)?;
    let reference = init_params(config, &mut SeededRng::new(0))?;
    if !reference.same_layout(&ck.params) {
        return Err(MuseError::config(format!(
            "checkpoint {} does not match the configured model",
            path.display()
        )));
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig { dim: 16, depth: 4, heads: 2, ..Default::default() };
        let mut p = init_params(&cfg, &mut SeededRng::new(3)).unwrap();
        p.get_mut("norm.b").unwrap().data_mut()[0] = f64::from_bits(0x3ff0_0000_0000_0001);
        let bytes = to_bytes(&p, &cfg, 17).unwrap();
        let ck = from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(ck.step, 17);
        assert_eq!(ck.config, cfg);
        for ((na, a), (nb, b)) in p.iter().zip(ck.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(a.shape(), b.shape());
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(to_bytes(&ck.params, &ck.config, 17).unwrap(), bytes);
    }

    #[test]
    fn truncated_archive_is_decode_error() {
        let cfg = ModelConfig { dim: 16, depth: 4, heads: 2, ..Default::default() };
        let p = init_params(&cfg, &mut SeededRng::new(3)).unwrap();
        let bytes = to_bytes(&p, &cfg, 0).unwrap();
        let err = from_bytes(&bytes[..bytes.len() - 4], Path::new("x")).unwrap_err();
        assert!(matches!(err, MuseError::Decode { .. }));
    }
}
