//! Named parameter storage, graph binding and the binary checkpoint format.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    /// He-normal initialized tensor with the given fan-in.
    pub fn add_he<R: Rng>(&mut self, name: &str, shape: Vec<usize>, fan_in: usize, rng: &mut R) -> usize {
        let n = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let count = shape.iter().product();
        let data = (0..count).map(|_| n.sample(rng)).collect();
        self.add(name, Tensor::new(shape, data).expect("shape"))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|i| &self.values[i])
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.values.iter().map(|t| g.param(t.clone())).collect()
    }

    /// Gradients of the bound parameters, zero where none flowed.
    pub fn grads(&self, g: &Graph, bound: &[Var]) -> Vec<Tensor> {
        bound
            .iter()
            .zip(&self.values)
            .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect()
    }

    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.values.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    config: serde_json::Value,
    seed: u64,
    step: u64,
    params: Vec<ParamEntry>,
}

const FORMAT: &str = "retopo-ckpt-1";

/// A checkpoint: model config as JSON, provenance counters and parameters.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub seed: u64,
    pub step: u64,
    pub params: ParamStore,
}

impl Checkpoint {
    /// Layout: u64 LE header length, JSON header, then every parameter's
    /// values as f64 LE in header order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format: FORMAT.into(),
            config: self.config.clone(),
            seed: self.seed,
            step: self.step,
            params: self
                .params
                .names()
                .iter()
                .zip(self.params.values())
                .map(|(n, t)| ParamEntry { name: n.clone(), shape: t.shape().to_vec() })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + json.len() + 8 * self.params.numel());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.params.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::validation(format!("corrupt checkpoint: {m}"));
        if bytes.len() < 8 {
            return Err(bad("truncated header length"));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        if bytes.len() < 8 + hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[8..8 + hlen])?;
        if header.format != FORMAT {
            return Err(bad(&format!("unknown format {}", header.format)));
        }
        let mut params = ParamStore::new();
        let mut chunks = bytes[8 + hlen..].chunks_exact(8);
        for e in header.params {
            let n: usize = e.shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let c = chunks.next().ok_or_else(|| bad("truncated parameter data"))?;
                data.push(f64::from_le_bytes(c.try_into().expect("8 bytes")));
            }
            params.add(e.name, Tensor::new(e.shape, data)?);
        }
        if chunks.next().is_some() || !chunks.remainder().is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Checkpoint { config: header.config, seed: header.seed, step: header.step, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// Copies values into `target`, which must have identical names and shapes.
    pub fn restore_into(&self, target: &mut ParamStore) -> Result<()> {
        if target.names() != self.params.names() {
            return Err(Error::validation("checkpoint parameters do not match the model"));
        }
        for (dst, src) in target.values_mut().iter_mut().zip(self.params.values()) {
            if dst.shape() != src.shape() {
                return Err(Error::validation(format!(
                    "checkpoint shape {:?} does not match model shape {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip_and_corruption() {
        let mut p = ParamStore::new();
        p.add("a", Tensor::vector(&[1.5, -2.0]));
        p.add("b", Tensor::from_fn(vec![2, 2], |i| (i[0] * 2 + i[1]) as f64 * 0.1));
        let ck = Checkpoint { config: serde_json::json!({"w": 3}), seed: 9, step: 12, params: p.clone() };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.params.values(), p.values());
        assert_eq!((back.seed, back.step), (9, 12));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut other = ParamStore::new();
        other.add("a", Tensor::vector(&[0.0]));
        other.add("b", Tensor::zeros(vec![2, 2]));
        assert!(back.restore_into(&mut other).is_err());
    }
}
