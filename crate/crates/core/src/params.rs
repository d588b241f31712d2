//! Named parameter storage and the shared model-file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "HSCM" | version u8 | content hash [8] | config_len u32 | config (UTF-8)
//! | n_tensors u32 | { name_len u16 | name | ndim u8 | dims u32 * ndim | f32 * numel } *
//! ```
//!
//! The content hash is the first 8 bytes of SHA-256 over everything after the
//! hash field. Values are stored as `f32`; [`ParamStore::snap_f32`] rounds an
//! in-memory store to exactly what a save/load cycle produces, so encoder and
//! decoder see identical parameters.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{HscError, Result};
use crate::numerics::{Graph, Tensor, Var};

pub const MODEL_MAGIC: &[u8; 4] = b"HSCM";
pub const MODEL_VERSION: u8 = 1;

pub type ModelHash = [u8; 8];

pub fn hash_hex(h: &ModelHash) -> String {
    h.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| HscError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn extend(&mut self, other: ParamStore) {
        self.tensors.extend(other.tensors);
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Sub-store of every tensor whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn snap_f32(&mut self) {
        for t in self.tensors.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    fn body_bytes(&self, config: &str) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    /// Hash of the serialized form (config text included).
    pub fn content_hash(&self, config: &str) -> ModelHash {
        digest8(&self.body_bytes(config))
    }

    /// Hash over the tensors whose names start with `prefix`.
    pub fn prefix_hash(&self, prefix: &str) -> ModelHash {
        self.subset(prefix).content_hash("")
    }

    pub fn to_bytes(&self, config: &str) -> Vec<u8> {
        let body = self.body_bytes(config);
        let mut out = Vec::with_capacity(body.len() + 13);
        out.extend_from_slice(MODEL_MAGIC);
        out.push(MODEL_VERSION);
        out.extend_from_slice(&digest8(&body));
        out.extend_from_slice(&body);
        out
    }

    /// Parses a model file; returns the store, the config text and the hash.
    pub fn from_bytes(bytes: &[u8]) -> Result<(ParamStore, String, ModelHash)> {
        let mut r = Reader {
            data: bytes,
            pos: 0,
        };
        if r.take(4)? != MODEL_MAGIC {
            return Err(HscError::ModelFormat("bad magic".into()));
        }
        let version = r.u8()?;
        if version != MODEL_VERSION {
            return Err(HscError::ModelFormat(format!(
                "unsupported version {version}"
            )));
        }
        let stored: ModelHash = r.take(8)?.try_into().expect("8 bytes");
        let body_start = r.pos;
        if digest8(&bytes[body_start..]) != stored {
            return Err(HscError::ModelFormat("content hash does not match".into()));
        }
        let clen = r.u32()? as usize;
        let config = String::from_utf8(r.take(clen)?.to_vec())
            .map_err(|_| HscError::ModelFormat("config is not UTF-8".into()))?;
        let n = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let nlen = r.u16()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| HscError::ModelFormat("tensor name is not UTF-8".into()))?;
            let ndim = r.u8()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let raw = r.take(
                count
                    .checked_mul(4)
                    .ok_or_else(|| HscError::ModelFormat("size overflow".into()))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            store.insert(name, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(HscError::ModelFormat("trailing bytes".into()));
        }
        Ok((store, config, stored))
    }

    pub fn save(&self, path: &Path, config: &str) -> Result<ModelHash> {
        std::fs::write(path, self.to_bytes(config))?;
        Ok(self.content_hash(config))
    }

    pub fn load(path: &Path) -> Result<(ParamStore, String, ModelHash)> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn digest8(bytes: &[u8]) -> ModelHash {
    let d = Sha256::digest(bytes);
    let mut h = [0u8; 8];
    h.copy_from_slice(&d[..8]);
    h
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.data.len())
            .ok_or_else(|| HscError::ModelFormat(format!("truncated at byte {}", self.pos)))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

/// A differentiation graph bound to a parameter store. Parameters whose names
/// start with one of the trainable prefixes become gradient-tracked leaves;
/// all others enter as constants. Each name is bound once per graph.
pub struct Ctx<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    trainable: Vec<String>,
    bound: HashMap<String, Var>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, trainable: &[&str]) -> Self {
        Ctx {
            g: Graph::new(),
            store,
            trainable: trainable.iter().map(|s| s.to_string()).collect(),
            bound: HashMap::new(),
        }
    }

    /// Inference-only context: nothing is tracked.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self::new(store, &[])
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?;
        let v = if self.trainable.iter().any(|p| name.starts_with(p.as_str())) {
            self.g.param(name, t)
        } else {
            self.g.constant(t.clone())
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.g.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.g.value(v)
    }

    /// Backward from `loss`; returns the loss value and gradients of every
    /// bound trainable parameter.
    pub fn gradients(&self, loss: Var) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let mut grads = self.g.backward(loss)?;
        Ok((self.g.value(loss).item(), self.g.param_grads(&mut grads)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(
            "a.w",
            Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, 0.1, 0.2, 0.3]).unwrap(),
        );
        s.insert("b.bias", Tensor::from_vec(vec![7.0]));
        s.snap_f32();
        s
    }

    #[test]
    fn round_trip_preserves_everything() {
        let s = sample();
        let bytes = s.to_bytes("k = 1\n");
        let (back, cfg, hash) = ParamStore::from_bytes(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(cfg, "k = 1\n");
        assert_eq!(hash, s.content_hash("k = 1\n"));
    }

    #[test]
    fn corruption_detected() {
        let mut bytes = sample().to_bytes("");
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        assert!(ParamStore::from_bytes(&bytes).is_err());
        assert!(ParamStore::from_bytes(&bytes[..10]).is_err());
    }

    #[test]
    fn prefix_hash_ignores_other_prefixes() {
        let mut s = sample();
        let h = s.prefix_hash("a.");
        s.get_mut("b.bias").unwrap().data_mut()[0] = 9.0;
        assert_eq!(s.prefix_hash("a."), h);
        s.get_mut("a.w").unwrap().data_mut()[0] = 9.0;
        assert_ne!(s.prefix_hash("a."), h);
    }

    #[test]
    fn ctx_tracks_only_trainable() {
        let s = sample();
        let mut ctx = Ctx::new(&s, &["a."]);
        let w = ctx.p("a.w").unwrap();
        let b = ctx.p("b.bias").unwrap();
        assert_eq!(ctx.p("a.w").unwrap(), w);
        let sw = ctx.g.sum_sq(w);
        let sb = ctx.g.sum(b);
        let l = ctx.g.add(sw, sb).unwrap();
        let (_, grads) = ctx.gradients(l).unwrap();
        assert_eq!(grads.len(), 1);
        assert!(grads.contains_key("a.w"));
    }
}
