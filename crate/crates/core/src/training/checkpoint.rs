//! Binary checkpoint format.
//!
//! ```text
//! "ALBT" | version: u32 LE | header_len: u64 LE | header JSON | f64 LE payloads
//! ```
//!
//! The header carries the configs, label space, counters and a tensor directory
//! of `{name, shape, offset}` where `offset` counts f64 values from the start of
//! the payload. Payloads are laid out in directory order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::AdamState;
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::labels::LabelSpace;
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ALBT";
pub const VERSION: u32 = 1;

const PARAM: &str = "param.";
const MOMENT1: &str = "adam.m.";
const MOMENT2: &str = "adam.v.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    train: Option<TrainConfig>,
    label_space: LabelSpace,
    /// Optimizer steps taken so far.
    step: u64,
    /// Completed epochs. Shuffling is derived from `(train.seed, epoch)`, so no other RNG state is kept.
    epoch: usize,
    tensors: Vec<TensorEntry>,
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub train: Option<TrainConfig>,
    pub optimizer: AdamState,
    pub epoch: usize,
}

impl Checkpoint {
    pub fn inference_only(model: Model) -> Self {
        Self {
            model,
            train: None,
            optimizer: AdamState::default(),
            epoch: 0,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut named: Vec<(String, &Tensor)> = Vec::new();
        named.extend(self.model.params.iter().map(|(n, t)| (format!("{PARAM}{n}"), t)));
        named.extend(self.optimizer.m.iter().map(|(n, t)| (format!("{MOMENT1}{n}"), t)));
        named.extend(self.optimizer.v.iter().map(|(n, t)| (format!("{MOMENT2}{n}"), t)));
        let mut offset = 0;
        let tensors = named
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.len();
                e
            })
            .collect();
        let header = Header {
            model: self.model.config.clone(),
            train: self.train.clone(),
            label_space: self.model.label_space.clone(),
            step: self.optimizer.step,
            epoch: self.epoch,
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &named {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not an ALBT checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let payload_start = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..payload_start])
            .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
        header.model.validate()?;
        header.label_space.validate()?;
        let payload = &bytes[payload_start..];
        let total: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if payload.len() != total * 8 {
            return Err(Error::Checkpoint(format!(
                "payload has {} bytes, directory needs {}",
                payload.len(),
                total * 8
            )));
        }
        let mut params = ParamStore::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let range = e.offset * 8..(e.offset + n) * 8;
            let chunk = payload
                .get(range)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {} outside payload", e.name)))?;
            let data = chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(e.shape.clone(), data)?;
            if let Some(n) = e.name.strip_prefix(PARAM) {
                params.insert(n, t);
            } else if let Some(n) = e.name.strip_prefix(MOMENT1) {
                m.insert(n.to_string(), t);
            } else if let Some(n) = e.name.strip_prefix(MOMENT2) {
                v.insert(n.to_string(), t);
            } else {
                return Err(Error::Checkpoint(format!("unknown tensor {}", e.name)));
            }
        }
        // Every parameter the architecture needs must be present with the right shape.
        let reference = Model::new(header.model.clone(), header.label_space.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            let got = params
                .get(name)
                .map_err(|_| Error::Checkpoint(format!("missing parameter {name}")))?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(Self {
            model: Model {
                config: header.model,
                label_space: header.label_space,
                params,
            },
            train: header.train,
            optimizer: AdamState {
                step: header.step,
                m,
                v,
            },
            epoch: header.epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_bytes(&bytes)
    }
}
