//! Checkpoint container.
//!
//! Layout: the 8-byte magic `CMILCKPT`, a little-endian `u64` manifest
//! length, the JSON manifest, then every tensor as raw little-endian `f64`.
//! Each manifest tensor entry gives its name, shape, dtype and the byte
//! offset and length of its data relative to the start of the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::diffcore::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"CMILCKPT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: serde_json::Value,
    pub epoch: usize,
    pub metrics: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Parameters plus the metadata echoed into the manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub epoch: usize,
    pub metrics: serde_json::Value,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::with_capacity(self.params.num_values() * 8);
        let mut tensors = Vec::with_capacity(self.params.len());
        for (name, t) in self.params.iter() {
            let offset = payload.len() as u64;
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f64".into(),
                offset,
                len: payload.len() as u64 - offset,
            });
        }
        let manifest = Manifest {
            config: self.config.clone(),
            epoch: self.epoch,
            metrics: self.metrics.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let bad = |m: String| TrainError::Checkpoint(m);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json_end = 16usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("manifest length exceeds file".into()))?;
        let manifest: Manifest =
            serde_json::from_slice(&bytes[16..json_end]).map_err(|e| bad(format!("manifest: {e}")))?;
        let payload = &bytes[json_end..];
        let mut params = ParamStore::new();
        for e in manifest.tensors {
            if e.dtype != "f64" {
                return Err(bad(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            let count: usize = e.shape.iter().product();
            if e.len != count as u64 * 8 {
                return Err(bad(format!("{}: length {} does not match shape {:?}", e.name, e.len, e.shape)));
            }
            let end = e
                .offset
                .checked_add(e.len)
                .filter(|&x| x <= payload.len() as u64)
                .ok_or_else(|| bad(format!("{}: data runs past end of file", e.name)))?;
            let data = payload[e.offset as usize..end as usize]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(e.shape.clone(), data).expect("length checked");
            params.insert(e.name, t);
        }
        Ok(Self {
            config: manifest.config,
            epoch: manifest.epoch,
            metrics: manifest.metrics,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        fs::write(path, self.to_bytes()).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = fs::read(path).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.insert("mil/head.w", Tensor::matrix(2, 2, vec![0.1, -0.0, f64::MIN_POSITIVE, 3.0]));
        params.insert("mil/head.b", Tensor::zeros(&[1, 2]));
        Checkpoint {
            config: serde_json::json!({"lambda": 1.0}),
            epoch: 4,
            metrics: serde_json::json!({"val_auc": 0.75}),
            params,
        }
    }

    #[test]
    fn round_trip_bitwise() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert!(back.params.bitwise_eq(&c.params));
        assert_eq!(back.epoch, 4);
        assert_eq!(back.config, c.config);
    }

    #[test]
    fn corrupt_inputs() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT00000000").is_err());
        let mut long = bytes.clone();
        long[8] = 0xff;
        assert!(Checkpoint::from_bytes(&long).is_err());
    }
}
