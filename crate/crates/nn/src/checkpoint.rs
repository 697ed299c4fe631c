//! Self-describing checkpoint files: magic, format version, a JSON header
//! (kind, step, config echo, tensor index, extra state) and a little-endian
//! f32 payload in header order.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"MSEPCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    step: u64,
    config: Value,
    extra: Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// `backbone` or `joint`.
    pub kind: String,
    pub step: u64,
    pub config: Value,
    pub extra: Value,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn new(kind: &str, step: u64, config: Value, extra: Value) -> Self {
        Self {
            kind: kind.to_string(),
            step,
            config,
            extra,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: &Tensor) -> Result<()> {
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        self.tensors.insert(name.to_string(), (t.dims().to_vec(), data));
        Ok(())
    }

    /// Adds every parameter of the store.
    pub fn insert_store(&mut self, ps: &ParamStore) -> Result<()> {
        for (name, var) in ps.vars() {
            self.insert(name, var.as_tensor())?;
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str, dtype: DType) -> Result<Option<Tensor>> {
        match self.tensors.get(name) {
            None => Ok(None),
            Some((shape, data)) => Ok(Some(
                Tensor::from_vec(data.clone(), shape.as_slice(), &Device::Cpu)?.to_dtype(dtype)?,
            )),
        }
    }

    /// Names with the given prefix, prefix stripped, as tensors.
    pub fn group(&self, prefix: &str, dtype: DType) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for name in self.tensors.keys() {
            if let Some(rest) = name.strip_prefix(prefix) {
                out.insert(rest.to_string(), self.tensor(name, dtype)?.expect("key exists"));
            }
        }
        Ok(out)
    }

    /// Loads parameters into `ps`. Every store parameter whose name starts
    /// with one of `prefixes` must be present with the same shape.
    pub fn restore_into(&self, ps: &ParamStore, prefixes: &[&str]) -> Result<()> {
        for (name, var) in ps.vars() {
            if !prefixes.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            let (shape, _) = self
                .tensors
                .get(name)
                .ok_or_else(|| Error::config(format!("checkpoint has no parameter {name}")))?;
            if shape.as_slice() != var.dims() {
                return Err(Error::config(format!(
                    "parameter {name}: checkpoint shape {shape:?} vs model shape {:?}",
                    var.dims()
                )));
            }
        }
        for (name, _) in ps.vars() {
            if prefixes.iter().any(|p| name.starts_with(p)) {
                let t = self.tensor(name, ps.dtype())?.expect("checked above");
                ps.assign(name, &t)?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, (shape, data)) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
                offset,
            });
            offset += data.len();
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            step: self.step,
            config: self.config.clone(),
            extra: self.extra.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::config(e.to_string()))?;
        let mut out = Vec::with_capacity(24 + json.len() + 4 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, data) in self.tensors.values() {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |message: String| Error::Checkpoint {
            path: origin.to_path_buf(),
            message,
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let payload_start = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: Header =
            serde_json::from_slice(&bytes[20..payload_start]).map_err(|e| bad(format!("bad header: {e}")))?;
        let payload = &bytes[payload_start..];
        let mut tensors = BTreeMap::new();
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let start = entry.offset * 4;
            let end = start + n * 4;
            if end > payload.len() {
                return Err(bad(format!("tensor {} runs past the payload", entry.name)));
            }
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.insert(entry.name, (entry.shape, data));
        }
        Ok(Self {
            kind: header.kind,
            step: header.step,
            config: header.config,
            extra: header.extra,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
