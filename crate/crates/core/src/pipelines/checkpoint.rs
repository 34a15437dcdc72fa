//! Versioned binary checkpoints.
//!
//! Layout (little endian):
//!
//! ```text
//! magic  "MVCCKPT\0"          8 bytes
//! version                     u32
//! header length               u64
//! header                      JSON (model config, metadata, tensor table)
//! parameters                  f64 × Σ rows·cols, in table order
//! optimizer moments (if any)  m then v, same order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamStore};
use crate::pipelines::optim::AdamState;
use crate::tensor::Mat;

const MAGIC: &[u8; 8] = b"MVCCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Pipeline stages that produced this checkpoint, oldest first.
    pub stages: Vec<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<AdamState>,
    /// Total optimizer steps taken so far.
    pub step: u64,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: u64,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
    optimizer_t: Option<u64>,
}

fn push_mats(out: &mut Vec<u8>, mats: &[Mat]) {
    for m in mats {
        for v in &m.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn mats(&mut self, table: &[TensorEntry]) -> Result<Vec<Mat>> {
        table
            .iter()
            .map(|e| {
                let n = e.rows * e.cols;
                let bytes = self.take(n * 8)?;
                let data = bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Ok(Mat::from_vec(e.rows, e.cols, data))
            })
            .collect()
    }
}

impl Checkpoint {
    pub fn new(model: Model, seed: u64) -> Self {
        Self {
            model,
            optimizer: None,
            step: 0,
            meta: CheckpointMeta {
                stages: Vec::new(),
                seed,
            },
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self
            .model
            .params
            .iter()
            .map(|(name, m)| TensorEntry {
                name: name.to_string(),
                rows: m.rows,
                cols: m.cols,
            })
            .collect();
        let header = Header {
            config: self.model.config.clone(),
            step: self.step,
            meta: self.meta.clone(),
            tensors,
            optimizer_t: self.optimizer.as_ref().map(|o| o.t),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(json.len() + 8 * self.model.params.num_scalars() * 3 + 20);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        push_mats(&mut out, self.model.params.values());
        if let Some(opt) = &self.optimizer {
            push_mats(&mut out, &opt.m);
            push_mats(&mut out, &opt.v);
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8).map_err(|_| Error::Format("not a checkpoint".into()))? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version(format!(
                "checkpoint version {version} (supported: {CHECKPOINT_VERSION})"
            )));
        }
        let len = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        header.config.validate()?;
        let values = r.mats(&header.tensors)?;
        let mut params = ParamStore::new();
        for (e, v) in header.tensors.iter().zip(values) {
            params.insert(e.name.clone(), v);
        }
        let optimizer = match header.optimizer_t {
            Some(t) => Some(AdamState {
                t,
                m: r.mats(&header.tensors)?,
                v: r.mats(&header.tensors)?,
            }),
            None => None,
        };
        if r.pos != buf.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        let model = Model {
            config: header.config,
            params,
        };
        let reference = Model::init(model.config.clone(), 0)?;
        reference.check_compatible(&model.params)?;
        Ok(Self {
            model,
            optimizer,
            step: header.step,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}
