//! Versioned array container: the magic `TDSVKIT1`, a little-endian `u64`
//! header length, a JSON header, then the raw little-endian payload.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tdsv_core::{Error, Result};
use tdsv_nn::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"TDSVKIT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArrayRole {
    Param,
    Buffer,
    Data,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
    pub role: ArrayRole,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    /// What the arrays are: `text`, `speaker`, `fusion-cnn` or `embeddings`.
    pub kind: String,
    pub seed: u64,
    pub config: serde_json::Value,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub index: BTreeMap<String, ArrayEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub meta: serde_json::Value,
    pub arrays: BTreeMap<String, (ArrayRole, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, seed: u64, config: serde_json::Value) -> Self {
        Checkpoint {
            kind: kind.into(),
            seed,
            config,
            meta: serde_json::Value::Null,
            arrays: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, role: ArrayRole, t: Tensor) {
        self.arrays.insert(name.into(), (role, t));
    }

    pub fn from_store(kind: impl Into<String>, seed: u64, config: serde_json::Value, store: &ParamStore) -> Self {
        let mut c = Checkpoint::new(kind, seed, config);
        for (name, p) in store.iter() {
            c.insert(name, ArrayRole::Param, p.value.clone());
        }
        for (name, b) in store.buffers() {
            c.insert(name, ArrayRole::Buffer, b.clone());
        }
        c
    }

    pub fn to_store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        for (name, (role, t)) in &self.arrays {
            match role {
                ArrayRole::Param => s.insert(name.clone(), t.clone()),
                ArrayRole::Buffer => s.set_buffer(name.clone(), t.clone()),
                ArrayRole::Data => {}
            }
        }
        s
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Lookup(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    pub fn config_as<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.config.clone())?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut index = BTreeMap::new();
        let mut payload = Vec::new();
        for (name, (role, t)) in &self.arrays {
            index.insert(
                name.clone(),
                ArrayEntry {
                    dtype: "f64".into(),
                    shape: t.shape().to_vec(),
                    offset: payload.len() as u64,
                    role: *role,
                },
            );
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            seed: self.seed,
            config: self.config.clone(),
            meta: self.meta.clone(),
            index,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing TDSVKIT1 magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if hlen > body.len() {
            return Err(bad(format!("header length {hlen} exceeds file size")));
        }
        let header: CheckpointHeader = serde_json::from_slice(&body[..hlen])?;
        if header.format_version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {}", header.format_version)));
        }
        let payload = &body[hlen..];
        let mut spans: Vec<(u64, u64, &str)> = Vec::new();
        let mut arrays = BTreeMap::new();
        for (name, e) in &header.index {
            if e.dtype != "f64" {
                return Err(bad(format!("{name}: unsupported dtype {}", e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset;
            let end = start + 8 * n as u64;
            if end > payload.len() as u64 {
                return Err(bad(format!("{name}: data runs past the payload")));
            }
            spans.push((start, end, name));
            let data = payload[start as usize..end as usize]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            arrays.insert(name.clone(), (e.role, Tensor::new(&e.shape, data)?));
        }
        spans.sort();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(bad(format!("arrays {} and {} overlap", w[0].2, w[1].2)));
            }
        }
        Ok(Checkpoint {
            kind: header.kind,
            seed: header.seed,
            config: header.config,
            meta: header.meta,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
