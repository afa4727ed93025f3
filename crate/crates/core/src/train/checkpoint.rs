//! Checkpoint file:
//!
//! ```text
//! "HRDT-C1\n", u32 header_len, header_len bytes of JSON header,
//! one tensor blob per parameter (header order),
//! then, if the header has an optimizer section, all first moments and all
//! second moments in the same order.
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::OptState;
use crate::embodiment::EmbodimentSpec;
use crate::error::{Error, Result};
use crate::model::{check_store, ModelConfig};
use crate::params::{InitSpec, ParamStore, Parameter};
use crate::tensor::{read_u32, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HRDT-C1\n";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub stage: String,
    pub steps: usize,
    pub seed: u64,
    pub dataset_hash: String,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub embodiment: EmbodimentSpec,
    pub params: ParamStore<f32>,
    pub opt: Option<OptState<f32>>,
    pub meta: TrainMeta,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    init: InitSpec,
}

#[derive(Serialize, Deserialize)]
struct OptHeader {
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model_config: ModelConfig,
    embodiment: EmbodimentSpec,
    meta: TrainMeta,
    params: Vec<ParamEntry>,
    opt: Option<OptHeader>,
}

impl Checkpoint {
    /// Validates the parameter set against the config and the embodiment.
    pub fn validate(&self) -> Result<()> {
        self.model_config.validate()?;
        self.embodiment.validate()?;
        self.embodiment.check_model(&self.model_config)?;
        check_store(&self.model_config, &self.params)?;
        if let Some(opt) = &self.opt {
            opt.check(&self.params)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            model_config: self.model_config.clone(),
            embodiment: self.embodiment.clone(),
            meta: self.meta.clone(),
            params: self
                .params
                .iter()
                .map(|p| ParamEntry {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                    init: p.init,
                })
                .collect(),
            opt: self.opt.as_ref().map(|o| OptHeader {
                step: o.step,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
            }),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(json.len() + 16 + 4 * self.params.numel() * 3);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for p in self.params.iter() {
            p.tensor.write_blob(&mut out)?;
        }
        if let Some(opt) = &self.opt {
            for map in [&opt.m, &opt.v] {
                for p in self.params.iter() {
                    map[&p.name].write_blob(&mut out)?;
                }
            }
        }
        Ok(out)
    }

    /// Parses and validates; `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::corrupt(path, reason);
        let blob_err = |e: Error| match e {
            Error::Blob(reason) => corrupt(reason),
            other => other,
        };
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| corrupt("file shorter than magic".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(corrupt("not a checkpoint (bad magic)".into()));
        }
        let len = read_u32(&mut r).map_err(blob_err)? as usize;
        let start = r.position() as usize;
        let json = bytes
            .get(start..start + len)
            .ok_or_else(|| corrupt(format!("header of {len} bytes is truncated")))?;
        // Check the version before the full schema so newer files report a version error.
        #[derive(Deserialize)]
        struct Probe {
            format_version: u32,
        }
        let probe: Probe =
            serde_json::from_slice(json).map_err(|e| corrupt(format!("header: {e}")))?;
        if probe.format_version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: probe.format_version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let header: Header =
            serde_json::from_slice(json).map_err(|e| corrupt(format!("header: {e}")))?;
        r.set_position((start + len) as u64);

        let mut params = ParamStore::new();
        for entry in &header.params {
            let tensor = Tensor::<f32>::read_blob(&mut r).map_err(blob_err)?;
            if tensor.shape() != entry.shape.as_slice() {
                return Err(corrupt(format!(
                    "`{}` has shape {:?}, header says {:?}",
                    entry.name,
                    tensor.shape(),
                    entry.shape
                )));
            }
            params.insert(Parameter {
                name: entry.name.clone(),
                tensor,
                init: entry.init,
            })?;
        }
        let opt = match &header.opt {
            None => None,
            Some(h) => {
                let mut read_all = || -> Result<BTreeMap<String, Tensor<f32>>> {
                    header
                        .params
                        .iter()
                        .map(|e| {
                            Ok((
                                e.name.clone(),
                                Tensor::<f32>::read_blob(&mut r).map_err(blob_err)?,
                            ))
                        })
                        .collect()
                };
                let m = read_all()?;
                let v = read_all()?;
                Some(OptState {
                    m,
                    v,
                    step: h.step,
                    beta1: h.beta1,
                    beta2: h.beta2,
                    eps: h.eps,
                })
            }
        };
        if (r.position() as usize) != bytes.len() {
            return Err(corrupt(format!(
                "{} trailing bytes",
                bytes.len() - r.position() as usize
            )));
        }
        let ckpt = Self {
            model_config: header.model_config,
            embodiment: header.embodiment,
            params,
            opt,
            meta: header.meta,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, path)
    }

    /// Errors unless the checkpoint was trained for `spec`'s action space.
    pub fn require_embodiment(&self, spec: &EmbodimentSpec) -> Result<()> {
        if self.embodiment.name != spec.name
            || self.embodiment.action_dim != spec.action_dim
            || self.embodiment.state_dim != spec.state_dim
        {
            return Err(Error::EmbodimentMismatch {
                expected: format!("{} ({}-d)", spec.name, spec.action_dim),
                found: format!(
                    "{} ({}-d)",
                    self.embodiment.name, self.embodiment.action_dim
                ),
            });
        }
        Ok(())
    }
}
