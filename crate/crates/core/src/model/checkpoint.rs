//! Self-describing checkpoint container.
//!
//! Layout: the 8-byte magic `WISECKPT`, a little-endian `u64` header length,
//! a JSON header (metadata plus the name and shape of every array, in
//! storage order), then each array's entries as little-endian `f64`.

use super::{ModelConfig, TinyTransformer};
use crate::error::{Result, WiseError};
use crate::numerics::Matrix;
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"WISECKPT";
pub const FORMAT_VERSION: u32 = 1;
const MODEL_PREFIX: &str = "model/";

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    meta: Map<String, Value>,
    arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Map<String, Value>,
    arrays: Vec<(String, Matrix<f64>)>,
}

fn ckpt_err(msg: impl Into<String>) -> WiseError {
    WiseError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert<T: Scalar>(&mut self, name: impl Into<String>, m: &Matrix<T>) {
        let data = m.data().iter().map(|x| x.as_f64()).collect();
        let m64 = Matrix::from_vec(m.rows(), m.cols(), data).expect("same shape");
        let name = name.into();
        match self.arrays.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = m64,
            None => self.arrays.push((name, m64)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Matrix<f64>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn require<T: Scalar>(&self, name: &str) -> Result<Matrix<T>> {
        let m = self
            .get(name)
            .ok_or_else(|| ckpt_err(format!("missing array {name}")))?;
        let data = m.data().iter().map(|&x| T::of(x)).collect();
        Matrix::from_vec(m.rows(), m.cols(), data)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.iter().map(|(n, _)| n.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format: "wise-checkpoint".into(),
            version: FORMAT_VERSION,
            meta: self.meta.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|(name, m)| ArrayEntry {
                    name: name.clone(),
                    rows: m.rows(),
                    cols: m.cols(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let payload: usize = self.arrays.iter().map(|(_, m)| m.len() * 8).sum();
        let mut out = Vec::with_capacity(16 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, m) in &self.arrays {
            for x in m.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(ckpt_err("not a checkpoint file (bad magic)"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if body.len() < header_len {
            return Err(ckpt_err("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..header_len])
            .map_err(|e| ckpt_err(format!("bad header: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(ckpt_err(format!("unsupported version {}", header.version)));
        }
        let mut cursor = &body[header_len..];
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for entry in header.arrays {
            let n = entry.rows * entry.cols;
            if cursor.len() < n * 8 {
                return Err(ckpt_err(format!("truncated array {}", entry.name)));
            }
            let (chunk, rest) = cursor.split_at(n * 8);
            let data = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            arrays.push((entry.name, Matrix::from_vec(entry.rows, entry.cols, data)?));
            cursor = rest;
        }
        if !cursor.is_empty() {
            return Err(ckpt_err("trailing bytes after last array"));
        }
        Ok(Self {
            meta: header.meta,
            arrays,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

impl<T: Scalar> TinyTransformer<T> {
    /// Writes the config and every parameter under `model/...`.
    pub fn write_to(&self, ckpt: &mut Checkpoint) {
        ckpt.meta.insert(
            "model_config".into(),
            serde_json::to_value(&self.config).expect("config serializes"),
        );
        for (name, p) in self.named_params() {
            ckpt.insert(format!("{MODEL_PREFIX}{name}"), p);
        }
    }

    pub fn read_from(ckpt: &Checkpoint) -> Result<Self> {
        let cfg_value = ckpt
            .meta
            .get("model_config")
            .ok_or_else(|| ckpt_err("missing model_config"))?;
        let config: ModelConfig = serde_json::from_value(cfg_value.clone())
            .map_err(|e| ckpt_err(format!("bad model_config: {e}")))?;
        let mut model = Self::new(config, 0)?.zeros_like();
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, p) in names.iter().zip(model.params_mut()) {
            let m = ckpt.require::<T>(&format!("{MODEL_PREFIX}{name}"))?;
            p.check_same_shape(&m, name)?;
            *p = m;
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut ckpt = Checkpoint::new();
        self.write_to(&mut ckpt);
        ckpt.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&Checkpoint::load(path)?)
    }
}
