//! Checkpoint format: `manifest.json` describing every tensor plus one
//! little-endian binary blob (`tensors.bin`) holding them back to back in
//! manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TinyTransformerConfig;
use super::transformer::TinyTransformer;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const FORMAT: &str = "simoe-checkpoint-v1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F64,
    U8,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    pub nbytes: usize,
}

/// Generator position, enough to resume a ChaCha stream exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    /// Word position, as a decimal string (it does not fit in a JSON number).
    pub word_pos: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    /// What the checkpoint holds: `seed`, `upcycled`, `finetuned`, `pruned`, `train_state`.
    pub kind: String,
    pub architecture: TinyTransformerConfig,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub config: serde_json::Value,
    #[serde(default)]
    pub rng_state: Option<RngState>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F64(Tensor),
    U8 { shape: Vec<usize>, bytes: Vec<u8> },
}

impl Payload {
    fn dtype(&self) -> DType {
        match self {
            Payload::F64(_) => DType::F64,
            Payload::U8 { .. } => DType::U8,
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            Payload::F64(t) => t.shape(),
            Payload::U8 { shape, .. } => shape,
        }
    }

    pub fn as_f64(&self) -> Option<&Tensor> {
        match self {
            Payload::F64(t) => Some(t),
            Payload::U8 { .. } => None,
        }
    }
}

/// Tensors and metadata of one checkpoint directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub architecture: TinyTransformerConfig,
    pub config: serde_json::Value,
    pub rng_state: Option<RngState>,
    pub extra: serde_json::Value,
    pub tensors: Vec<(String, Payload)>,
}

impl Checkpoint {
    pub fn new(kind: &str, architecture: TinyTransformerConfig) -> Self {
        Checkpoint {
            kind: kind.to_string(),
            architecture,
            config: serde_json::Value::Null,
            rng_state: None,
            extra: serde_json::Value::Null,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), Payload::F64(t)));
    }

    pub fn push_bytes(&mut self, name: impl Into<String>, shape: Vec<usize>, bytes: Vec<u8>) {
        self.tensors.push((name.into(), Payload::U8 { shape, bytes }));
    }

    pub fn get(&self, name: &str) -> Option<&Payload> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .and_then(Payload::as_f64)
            .ok_or_else(|| Error::Contract(format!("checkpoint has no f64 tensor {name:?}")))
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.get(name) {
            Some(Payload::U8 { bytes, .. }) => Ok(bytes),
            _ => Err(Error::Contract(format!("checkpoint has no u8 tensor {name:?}"))),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, p) in &self.tensors {
            let offset = blob.len();
            match p {
                Payload::F64(t) => t.data().iter().for_each(|v| blob.extend_from_slice(&v.to_le_bytes())),
                Payload::U8 { bytes, .. } => blob.extend_from_slice(bytes),
            }
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: p.dtype(),
                shape: p.shape().to_vec(),
                offset,
                nbytes: blob.len() - offset,
            });
        }
        let manifest = Manifest {
            format: FORMAT.to_string(),
            kind: self.kind.clone(),
            architecture: self.architecture.clone(),
            tensors: entries,
            config: self.config.clone(),
            rng_state: self.rng_state.clone(),
            extra: self.extra.clone(),
        };
        let mpath = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(&mpath, e.to_string()))?;
        fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
        let bpath = dir.join(BLOB_FILE);
        fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
        if manifest.format != FORMAT {
            return Err(Error::format(
                &mpath,
                format!("unsupported format {:?}", manifest.format),
            ));
        }
        let bpath = dir.join(BLOB_FILE);
        let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            let numel: usize = e.shape.iter().product();
            if e.nbytes != numel * e.dtype.width() || e.offset + e.nbytes > blob.len() {
                return Err(Error::format(
                    &bpath,
                    format!("tensor {} does not fit the blob", e.name),
                ));
            }
            let raw = &blob[e.offset..e.offset + e.nbytes];
            let p = match e.dtype {
                DType::F64 => {
                    let data = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    Payload::F64(Tensor::new(e.shape.clone(), data)?)
                }
                DType::U8 => Payload::U8 {
                    shape: e.shape.clone(),
                    bytes: raw.to_vec(),
                },
            };
            tensors.push((e.name.clone(), p));
        }
        Ok(Checkpoint {
            kind: manifest.kind,
            architecture: manifest.architecture,
            config: manifest.config,
            rng_state: manifest.rng_state,
            extra: manifest.extra,
            tensors,
        })
    }

    /// Total size on disk of manifest plus blob.
    pub fn disk_size(dir: &Path) -> Result<u64> {
        let mut total = 0;
        for f in [MANIFEST_FILE, BLOB_FILE] {
            let p = dir.join(f);
            total += fs::metadata(&p).map_err(|e| Error::io(&p, e))?.len();
        }
        Ok(total)
    }
}

impl TinyTransformer {
    pub fn to_checkpoint(&self, kind: &str) -> Checkpoint {
        let mut ck = Checkpoint::new(kind, self.config.clone());
        for (id, w) in self.config.layer_ids().into_iter().zip(&self.weights) {
            ck.push(id.name(), w.clone());
        }
        ck
    }

    /// Reads the dense tensors named after the layer ids, optionally under a prefix.
    pub fn from_checkpoint(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let cfg = ck.architecture.clone();
        let weights = cfg
            .layer_ids()
            .into_iter()
            .map(|id| ck.tensor(&format!("{prefix}{id}")).cloned())
            .collect::<Result<Vec<_>>>()?;
        TinyTransformer::from_weights(cfg, weights)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.to_checkpoint("seed").save(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        TinyTransformer::from_checkpoint(&Checkpoint::load(dir)?, "")
    }
}
