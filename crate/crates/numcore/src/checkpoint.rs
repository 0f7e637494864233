//! Flat parameter checkpoints.
//!
//! Layout: an 8-byte little-endian `u64` header length, a UTF-8 JSON header
//! `{"tensors": [{"name", "shape"}...], "meta": ...}`, then every tensor's
//! values as little-endian `f32` in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{NumError, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Named tensors plus free-form metadata.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub tensors: Vec<(String, Tensor<T>)>,
    pub meta: serde_json::Value,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { tensors: Vec::new(), meta }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors whose names start with `prefix`, in stored order.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Tensor<T>)> + 'a {
        self.tensors
            .iter()
            .filter(move |(n, _)| n.starts_with(prefix))
            .map(|(n, t)| (n.as_str(), t))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, NumError> {
        let header = Header {
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry { name: name.clone(), shape: t.shape().to_vec() })
                .collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let values: usize = self.tensors.iter().map(|(_, t)| t.len()).sum();
        let mut out = Vec::with_capacity(8 + json.len() + 4 * values);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NumError> {
        if bytes.len() < 8 {
            return Err(NumError::Format("missing header length".into()));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let body_start = 8usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| NumError::Format(format!("header length {header_len} exceeds file")))?;
        let header: Header = serde_json::from_slice(&bytes[8..body_start])?;
        let mut body = &bytes[body_start..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            if body.len() < 4 * n {
                return Err(NumError::Format(format!("tensor {} truncated", entry.name)));
            }
            let data = body[..4 * n]
                .chunks_exact(4)
                .map(|c| T::cast(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect();
            body = &body[4 * n..];
            tensors.push((entry.name, Tensor::new(entry.shape, data)));
        }
        if !body.is_empty() {
            return Err(NumError::Format(format!("{} trailing bytes", body.len())));
        }
        Ok(Self { tensors, meta: header.meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NumError> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NumError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
