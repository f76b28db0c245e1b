//! Self-describing checkpoint archive.
//!
//! `"EMOC"`, version byte, u64 LE header length, a JSON header (architecture
//! config, training metadata, tensor directory), then every tensor as raw
//! little-endian f64 in directory order.

use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::param::Module;
use super::{ModelConfig, TaggerModel};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"EMOC";
const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// `long` or `short`.
    pub mode: String,
    pub epoch: usize,
    pub best_epoch: usize,
    pub best_val_roc_auc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    meta: CheckpointMeta,
    gem_p: Vec<(String, f64)>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub meta: CheckpointMeta,
    tensors: Vec<(String, ArrayD<f64>)>,
}

impl Checkpoint {
    pub fn capture(model: &TaggerModel, meta: CheckpointMeta) -> Self {
        Self {
            model: model.config().clone(),
            meta,
            tensors: model.params().into_iter().map(|(n, p)| (n, p.value.clone())).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            model: self.model.clone(),
            meta: self.meta.clone(),
            gem_p: self
                .tensors
                .iter()
                .filter(|(n, _)| n.ends_with("gem.p"))
                .map(|(n, v)| (n.clone(), v.iter().next().copied().unwrap_or(f64::NAN)))
                .collect(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, v)| TensorEntry {
                    name: n.clone(),
                    shape: v.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, v) in &self.tensors {
            for x in v.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint {
            path: path.to_path_buf(),
            message: m.to_string(),
        };
        if bytes.len() < 13 || &bytes[0..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        if bytes[4] != VERSION {
            return Err(bad("unsupported version"));
        }
        let hlen = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
        let hend = 13usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[13..hend]).map_err(|e| bad(&format!("header: {e}")))?;
        let mut off = hend;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for t in header.tensors {
            let n: usize = t.shape.iter().product();
            let end = off + n * 8;
            if end > bytes.len() {
                return Err(bad(&format!("truncated tensor `{}`", t.name)));
            }
            let vals: Vec<f64> = bytes[off..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            off = end;
            tensors.push((t.name, ArrayD::from_shape_vec(IxDyn(&t.shape), vals).expect("sized")));
        }
        if off != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            model: header.model,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Copy weights into `model` after checking the architecture matches.
    pub fn assign_to(&self, model: &mut TaggerModel) -> Result<()> {
        let mut want = self.model.clone();
        let have = model.config();
        // the init seed does not affect compatibility
        want.seed = have.seed;
        if &want != have {
            return Err(Error::Config(format!(
                "checkpoint architecture {want:?} does not match model {have:?}"
            )));
        }
        let mut params = model.params_mut();
        if params.len() != self.tensors.len() {
            return Err(Error::Config("checkpoint tensor count mismatch".into()));
        }
        for ((name, p), (tname, value)) in params.iter_mut().zip(&self.tensors) {
            if name != tname || p.value.shape() != value.shape() {
                return Err(Error::Config(format!(
                    "checkpoint tensor `{tname}` does not fit `{name}`"
                )));
            }
        }
        for ((_, p), (_, value)) in params.into_iter().zip(&self.tensors) {
            p.value.assign(value);
        }
        Ok(())
    }

    pub fn build_model(&self) -> Result<TaggerModel> {
        let mut m = TaggerModel::new(self.model.clone())?;
        self.assign_to(&mut m)?;
        Ok(m)
    }
}
