//! Model checkpoints (`DGCK`).
//!
//! Layout: magic `DGCK`, `u32` version, `u32` header length, canonical JSON
//! header, then one DGT1 f64 tensor per name listed in the header. The
//! parameters come first in [`ModelParams`] order, followed by the Adam
//! moments (`adam.m.<name>`, `adam.v.<name>`) when optimizer state is saved.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featurizers::{ModelConfig, ModelError, ModelParams};
use crate::json::to_canonical;
use crate::tensor::serialize::{read_tensor, read_u32, write_tensor, DecodeError, Dtype};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DGCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const MAX_HEADER: u32 = 1 << 20;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Which parameters the optimizer state covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Full,
}

/// Adam moments for a subset of the parameters, by name.
#[derive(Clone, Debug, PartialEq)]
pub struct SavedOptimizer {
    pub phase: Phase,
    pub adam_steps: u64,
    pub names: Vec<String>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    /// Global training step the parameters are the result of.
    pub step: u64,
    pub optimizer: Option<SavedOptimizer>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    phase: Phase,
    adam_steps: u64,
    names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    step: u64,
    params: Vec<String>,
    optimizer: Option<OptimizerHeader>,
}

impl Checkpoint {
    pub fn write<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let header = Header {
            model: self.params.config.clone(),
            step: self.step,
            params: self.params.names().to_vec(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                phase: o.phase,
                adam_steps: o.adam_steps,
                names: o.names.clone(),
            }),
        };
        let json = to_canonical(&header).map_err(std::io::Error::other)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(json.as_bytes())?;
        for t in self.params.tensors() {
            write_tensor(w, t, Dtype::F64)?;
        }
        if let Some(o) = &self.optimizer {
            for t in o.m.iter().chain(&o.v) {
                write_tensor(w, t, Dtype::F64)?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self, CheckpointError> {
        let corrupt = |s: &str| CheckpointError::Corrupt(s.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| corrupt("truncated magic"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = read_u32(r).map_err(|_| corrupt("truncated version"))?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Corrupt(format!("unsupported version {version}")));
        }
        let len = read_u32(r).map_err(|_| corrupt("truncated header length"))?;
        if len > MAX_HEADER {
            return Err(corrupt("header too large"));
        }
        let mut json = vec![0u8; len as usize];
        r.read_exact(&mut json).map_err(|_| corrupt("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&json).map_err(|e| CheckpointError::Corrupt(format!("bad header: {e}")))?;
        let mut named = Vec::with_capacity(header.params.len());
        for name in header.params {
            named.push((name, read_tensor(r)?));
        }
        let params = ModelParams::from_named(header.model, named)?;
        let optimizer = match header.optimizer {
            None => None,
            Some(o) => {
                let n = o.names.len();
                let mut m = Vec::with_capacity(n);
                let mut v = Vec::with_capacity(n);
                for _ in 0..n {
                    m.push(read_tensor(r)?);
                }
                for _ in 0..n {
                    v.push(read_tensor(r)?);
                }
                for (i, name) in o.names.iter().enumerate() {
                    let p = params
                        .get(name)
                        .ok_or_else(|| CheckpointError::Corrupt(format!("optimizer names unknown parameter {name}")))?;
                    if m[i].shape() != p.shape() || v[i].shape() != p.shape() {
                        return Err(CheckpointError::Corrupt(format!("moment shape mismatch for {name}")));
                    }
                }
                Some(SavedOptimizer {
                    phase: o.phase,
                    adam_steps: o.adam_steps,
                    names: o.names,
                    m,
                    v,
                })
            }
        };
        Ok(Checkpoint {
            params,
            step: header.step,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
        self.write(&mut w).and_then(|_| w.flush()).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let f = fs::File::open(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::read(&mut BufReader::new(f))
    }

    /// FNV-1a 64 of the serialized bytes, as 16 hex digits.
    pub fn checksum(&self) -> String {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("in-memory write");
        let h = buf
            .iter()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3));
        format!("{h:016x}")
    }
}
