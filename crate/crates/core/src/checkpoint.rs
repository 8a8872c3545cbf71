//! Array container: an 8-byte magic, a little-endian `u64` header length, a
//! JSON header, then every array as raw little-endian `f32` in header order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Real;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"TXBCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub arrays: Vec<ArrayMeta>,
    pub step: u64,
    pub config_hash: String,
    /// Free-form payload (network configs, schedules, ...).
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config_hash: String,
    pub meta: serde_json::Value,
    arrays: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn new(step: u64, config_hash: impl Into<String>, meta: serde_json::Value) -> Self {
        Self { step, config_hash: config_hash.into(), meta, arrays: BTreeMap::new() }
    }

    /// Typed entry of the header metadata.
    pub fn meta_field<C: serde::de::DeserializeOwned>(&self, key: &str) -> Result<C> {
        let v = self.meta.get(key).ok_or_else(|| Error::Format(format!("checkpoint header lacks `{key}`")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    pub fn set_meta<C: Serialize>(&mut self, key: &str, v: &C) -> Result<()> {
        if !self.meta.is_object() {
            self.meta = serde_json::json!({});
        }
        self.meta[key] = serde_json::to_value(v)?;
        Ok(())
    }

    pub fn insert<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.arrays.insert(name.into(), t.cast());
    }

    pub fn insert_params<T: Real>(&mut self, prefix: &str, p: &ParamSet<T>) {
        for (name, t) in p.iter() {
            self.insert(format!("{prefix}{name}"), t);
        }
    }

    pub fn get<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        self.arrays.get(name).map(Tensor::cast).ok_or_else(|| Error::Format(format!("checkpoint lacks array `{name}`")))
    }

    /// All arrays whose name starts with `prefix`, with the prefix stripped.
    pub fn params<T: Real>(&self, prefix: &str) -> ParamSet<T> {
        let mut p = ParamSet::new();
        for (name, t) in &self.arrays {
            if let Some(rest) = name.strip_prefix(prefix) {
                p.insert(rest, t.cast());
            }
        }
        p
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            arrays: self
                .arrays
                .iter()
                .map(|(n, t)| ArrayMeta { name: n.clone(), shape: t.shape().to_vec(), dtype: "f32".into() })
                .collect(),
            step: self.step,
            config_hash: self.config_hash.clone(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 4 * self.arrays.values().map(Tensor::len).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.arrays.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint container".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| Error::Format("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut off = 16 + hlen;
        let mut arrays = BTreeMap::new();
        for a in header.arrays {
            if a.dtype != "f32" {
                return Err(Error::Format(format!("unsupported dtype {}", a.dtype)));
            }
            let n: usize = a.shape.iter().product();
            let raw = bytes.get(off..off + 4 * n).ok_or_else(|| Error::Format(format!("truncated array {}", a.name)))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            arrays.insert(a.name, Tensor::from_vec(&a.shape, data)?);
            off += 4 * n;
        }
        if off != bytes.len() {
            return Err(Error::Format("trailing bytes after last array".into()));
        }
        Ok(Self { step: header.step, config_hash: header.config_hash, meta: header.meta, arrays })
    }

    /// Writes the container and returns its SHA-256 digest.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        fs::write(path, &bytes)?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut c = Checkpoint::new(7, "abc", serde_json::json!({"k": 1}));
        c.insert("b", &Tensor::<f64>::from_vec(&[2], vec![1.5, -2.0]).unwrap());
        c.insert("a", &Tensor::<f32>::zeros(&[1, 2, 3]));
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.get::<f64>("b").unwrap().data(), &[1.5, -2.0]);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
