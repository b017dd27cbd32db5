//! Versioned checkpoint container.
//!
//! Layout: `b"LGCKPT01"`, a little-endian `u64` header length, the JSON
//! header, then every tensor listed in the header as little-endian `f64`
//! values in header order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::AdamW;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LGCKPT01";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    seed: u64,
    config_hash: String,
    architecture_hash: String,
    optimizer: OptimizerMeta,
    params: Vec<Entry>,
    first_moments: Vec<Entry>,
    second_moments: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimizerMeta {
    step: u64,
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

/// Everything needed to resume or evaluate a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub config_hash: String,
    pub architecture_hash: String,
    pub params: ParamStore,
    pub optimizer: AdamW,
}

fn entries(map: &BTreeMap<String, Tensor>) -> Vec<Entry> {
    map.iter()
        .map(|(n, t)| Entry {
            name: n.clone(),
            shape: t.shape().to_vec(),
        })
        .collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let params: BTreeMap<String, Tensor> = self.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        let header = Header {
            version: CHECKPOINT_VERSION,
            seed: self.seed,
            config_hash: self.config_hash.clone(),
            architecture_hash: self.architecture_hash.clone(),
            optimizer: OptimizerMeta {
                step: self.optimizer.step,
                lr: self.optimizer.lr,
                weight_decay: self.optimizer.weight_decay,
                beta1: self.optimizer.beta1,
                beta2: self.optimizer.beta2,
                eps: self.optimizer.eps,
            },
            params: entries(&params),
            first_moments: entries(&self.optimizer.m),
            second_moments: entries(&self.optimizer.v),
        };
        let head = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(head.len() as u64).to_le_bytes());
        out.extend_from_slice(&head);
        for t in params.values().chain(self.optimizer.m.values()).chain(self.optimizer.v.values()) {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let bad = |what: String| Error::Load(format!("{origin}: {what}"));
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("bad header: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {}", header.version)));
        }
        let mut pos = 16 + hlen;
        let mut take = |list: &[Entry]| -> Result<BTreeMap<String, Tensor>> {
            let mut m = BTreeMap::new();
            for e in list {
                let n: usize = e.shape.iter().product();
                let raw = bytes
                    .get(pos..pos + 8 * n)
                    .ok_or_else(|| bad(format!("truncated data for `{}`", e.name)))?;
                pos += 8 * n;
                let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
                m.insert(e.name.clone(), Tensor::new(&e.shape, data)?);
            }
            Ok(m)
        };
        let params = take(&header.params)?;
        let m = take(&header.first_moments)?;
        let v = take(&header.second_moments)?;
        if pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
        }
        let mut store = ParamStore::new();
        for (n, t) in params {
            store.insert(&n, t);
        }
        let o = header.optimizer;
        Ok(Self {
            seed: header.seed,
            config_hash: header.config_hash,
            architecture_hash: header.architecture_hash,
            params: store,
            optimizer: AdamW {
                lr: o.lr,
                weight_decay: o.weight_decay,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                step: o.step,
                m,
                v,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    /// Fails unless the checkpoint was written for an architecture with
    /// exactly the parameters of `expected`.
    pub fn check_architecture(&self, expected: &ParamStore, architecture_hash: &str) -> Result<()> {
        expected.check_compatible(&self.params)?;
        if self.architecture_hash != architecture_hash {
            return Err(Error::Load(format!(
                "checkpoint architecture hash {} does not match the configuration ({architecture_hash})",
                self.architecture_hash
            )));
        }
        Ok(())
    }
}
