//! Binary container for parameters and Fisher vectors.
//!
//! Layout: one UTF-8 JSON header line terminated by `\n`, followed directly
//! by the payload of little-endian f64 values. Tensors appear in manifest
//! order with contiguous, non-overlapping byte ranges.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::FisherVector;
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_length: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FisherMeta {
    pub task_label: String,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<ManifestEntry>,
    #[serde(default)]
    pub fisher: Option<FisherMeta>,
}

/// Decoded container contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor)>,
    pub fisher: Option<FisherMeta>,
}

impl Container {
    pub fn from_params(params: &ModelParams) -> Self {
        Container {
            config: params.config().clone(),
            tensors: params.tensors().to_vec(),
            fisher: None,
        }
    }

    /// A Fisher vector laid out with the manifest of the parameters it scores.
    pub fn from_fisher(fisher: &FisherVector, params: &ModelParams) -> Result<Self> {
        let flat = params.unflatten(&fisher.values)?;
        Ok(Container {
            config: params.config().clone(),
            tensors: flat.tensors().to_vec(),
            fisher: Some(FisherMeta {
                task_label: fisher.task_label.clone(),
                n_samples: fisher.n_samples,
            }),
        })
    }

    pub fn into_params(self) -> Result<ModelParams> {
        if self.fisher.is_some() {
            return Err(Error::Format("container holds a fisher vector, not parameters".into()));
        }
        ModelParams::from_tensors(self.config, self.tensors)
    }

    pub fn into_fisher(self) -> Result<FisherVector> {
        let meta = self
            .fisher
            .ok_or_else(|| Error::Format("container holds parameters, not a fisher vector".into()))?;
        let params = ModelParams::from_tensors(self.config, self.tensors)?;
        Ok(FisherVector {
            values: params.flatten(),
            n_samples: meta.n_samples,
            task_label: meta.task_label,
        })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let len = (t.len() * 8) as u64;
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                byte_offset: offset,
                byte_length: len,
            });
            offset += len;
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            tensors: entries,
            fisher: self.fisher.clone(),
        };
        let mut out = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        out.push(b'\n');
        out.reserve(offset as usize);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("missing header terminator".into()))?;
        let header: Header =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Format(format!("bad header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {}", header.format_version)));
        }
        header.config.validate()?;
        let payload = &bytes[nl + 1..];
        let mut expected = 0u64;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            if e.byte_offset != expected {
                return Err(Error::Format(format!(
                    "tensor {} at offset {}, expected {expected}",
                    e.name, e.byte_offset
                )));
            }
            let count: usize = e.shape.iter().product();
            if e.byte_length != (count * 8) as u64 {
                return Err(Error::Format(format!(
                    "tensor {} declares {} bytes for {count} values",
                    e.name, e.byte_length
                )));
            }
            let end = (e.byte_offset + e.byte_length) as usize;
            let raw = payload
                .get(e.byte_offset as usize..end)
                .ok_or_else(|| Error::Format(format!("payload truncated in tensor {}", e.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
            expected = end as u64;
        }
        if payload.len() as u64 != expected {
            return Err(Error::Format(format!(
                "payload is {} bytes, manifest covers {expected}",
                payload.len()
            )));
        }
        Ok(Container {
            config: header.config,
            tensors,
            fisher: header.fisher,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Container::decode(&bytes)
    }
}

pub fn save_params(path: &Path, params: &ModelParams) -> Result<()> {
    Container::from_params(params).save(path)
}

pub fn load_params(path: &Path) -> Result<ModelParams> {
    Container::load(path)?.into_params()
}

pub fn save_fisher(path: &Path, fisher: &FisherVector, params: &ModelParams) -> Result<()> {
    Container::from_fisher(fisher, params)?.save(path)
}

pub fn load_fisher(path: &Path) -> Result<FisherVector> {
    Container::load(path)?.into_fisher()
}
