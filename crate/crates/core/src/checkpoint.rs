//! Named-array checkpoint container.
//!
//! Layout: the 8-byte magic `CPLCKPT\x01`, a little-endian `u64` header length, a
//! JSON header (metadata, array table, index descriptors), then the array data
//! as little-endian `f64`. Files are written to a temporary sibling and renamed.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CouplingError, Result};
use crate::nn::ParamStore;
use crate::optim::AdamW;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CPLCKPT\x01";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
    indices: Vec<(String, Vec<usize>)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Map<String, serde_json::Value>,
    arrays: Vec<(String, Tensor<f64>)>,
    indices: Vec<(String, Vec<usize>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl Serialize) {
        self.meta
            .insert(key.into(), serde_json::to_value(value).expect("metadata serializes"));
    }

    pub fn meta_value<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| CouplingError::Prerequisite(format!("checkpoint metadata `{key}` missing")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    pub fn insert<F: Scalar>(&mut self, name: impl Into<String>, value: &Tensor<F>) {
        let name = name.into();
        self.arrays.retain(|(n, _)| *n != name);
        self.arrays.push((name, value.cast()));
    }

    pub fn insert_indices(&mut self, name: impl Into<String>, idx: Vec<usize>) {
        self.indices.push((name.into(), idx));
    }

    pub fn array(&self, name: &str) -> Option<&Tensor<f64>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn indices(&self, name: &str) -> Option<&[usize]> {
        self.indices.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn array_names(&self) -> impl Iterator<Item = &str> {
        self.arrays.iter().map(|(n, _)| n.as_str())
    }

    pub fn add_store<F: Scalar>(&mut self, store: &ParamStore<F>) {
        for (name, t) in store.iter() {
            self.insert(name, t);
        }
    }

    /// Overwrite every parameter of `store` from the arrays of the same name.
    pub fn restore_store<F: Scalar>(&self, store: &mut ParamStore<F>) -> Result<()> {
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let t = self
                .array(&name)
                .ok_or_else(|| CouplingError::Prerequisite(format!("checkpoint lacks parameter `{name}`")))?;
            store.assign(&name, t.cast())?;
        }
        Ok(())
    }

    pub fn add_optimizer<F: Scalar>(&mut self, tag: &str, opt: &AdamW<F>, store: &ParamStore<F>) {
        for (i, (name, _)) in store.iter().enumerate() {
            self.insert(format!("{tag}.first.{name}"), &opt.first[i]);
            self.insert(format!("{tag}.second.{name}"), &opt.second[i]);
        }
        self.set_meta(&format!("{tag}.step"), opt.step);
    }

    pub fn restore_optimizer<F: Scalar>(&self, tag: &str, opt: &mut AdamW<F>, store: &ParamStore<F>) -> Result<()> {
        for (i, (name, t)) in store.iter().enumerate() {
            for (kind, slot) in [("first", &mut opt.first[i]), ("second", &mut opt.second[i])] {
                let key = format!("{tag}.{kind}.{name}");
                let saved = self
                    .array(&key)
                    .ok_or_else(|| CouplingError::Prerequisite(format!("checkpoint lacks `{key}`")))?;
                if saved.shape() != t.shape() {
                    return Err(CouplingError::Shape(format!("optimizer state `{key}`")));
                }
                *slot = saved.cast();
            }
        }
        opt.step = self.meta_value(&format!("{tag}.step"))?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let arrays = self
            .arrays
            .iter()
            .map(|(name, t)| {
                let e = ArrayEntry {
                    name: name.clone(),
                    rows: t.rows(),
                    cols: t.cols(),
                    offset,
                };
                offset += t.len();
                e
            })
            .collect();
        let header = Header {
            meta: serde_json::Value::Object(self.meta.clone()),
            arrays,
            indices: self.indices.clone(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.arrays {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let bad = |message: &str| CouplingError::Format {
            path: origin.into(),
            message: message.into(),
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..body]).map_err(|e| bad(&e.to_string()))?;
        let data = &bytes[body..];
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for e in header.arrays {
            let start = e.offset * 8;
            let end = start + e.rows * e.cols * 8;
            if end > data.len() {
                return Err(bad(&format!("array `{}` runs past end of file", e.name)));
            }
            let vals = data[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            arrays.push((e.name, Tensor::from_vec(e.rows, e.cols, vals)?));
        }
        let meta = match header.meta {
            serde_json::Value::Object(m) => m,
            _ => return Err(bad("metadata is not an object")),
        };
        Ok(Checkpoint {
            meta,
            arrays,
            indices: header.indices,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                CouplingError::Prerequisite(format!("checkpoint {} not found", path.display()))
            } else {
                e.into()
            }
        })?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

/// Write via a temporary sibling and rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
