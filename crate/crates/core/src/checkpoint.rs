//! Single-file checkpoints.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! offset  size  content
//! 0       8     magic "COCACKPT"
//! 8       4     u32 format version (1)
//! 12      8     u64 header length H
//! 20      H     UTF-8 JSON header
//! 20+H    ...   f32 tensor payloads, back to back in manifest order
//! ```
//!
//! The header holds the model config, the step, the opaque RNG state (hex),
//! optional training metadata and the tensor manifest. Each manifest entry
//! carries `name`, `shape`, `offset` (bytes from the start of the payload)
//! and `len` (element count). Model parameters come first in canonical
//! order, followed by optimizer moments named `optim.m.<path>` and
//! `optim.v.<path>` when present.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{bail, CocaError, Result};
use crate::model::{param_specs, Model, ModelConfig, ModelParams, TensorSpec};

pub const MAGIC: &[u8; 8] = b"COCACKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: ModelConfig,
    step: u64,
    rng_state: String,
    #[serde(default)]
    metadata: serde_json::Value,
    tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub rng_state: Vec<u8>,
    pub metadata: serde_json::Value,
    pub tensors: Vec<(TensorSpec, Vec<f32>)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, step: u64) -> Self {
        let tensors =
            param_specs(&model.config).into_iter().zip(model.params.tensors()).map(|(s, t)| (s, t.to_vec())).collect();
        Self { config: model.config.clone(), step, rng_state: Vec::new(), metadata: serde_json::Value::Null, tensors }
    }

    /// Appends a parameter-shaped tree under `prefix` (e.g. optimizer moments).
    pub fn push_tree(&mut self, prefix: &str, tree: &ModelParams<f32>) {
        for (s, t) in param_specs(&self.config).into_iter().zip(tree.tensors()) {
            self.tensors.push((TensorSpec { name: format!("{prefix}{}", s.name), shape: s.shape }, t.to_vec()));
        }
    }

    /// Reassembles a parameter-shaped tree stored under `prefix`.
    pub fn tree(&self, prefix: &str) -> Result<ModelParams<f32>> {
        let specs = param_specs(&self.config);
        let mut tensors = Vec::with_capacity(specs.len());
        for s in &specs {
            let name = format!("{prefix}{}", s.name);
            let (spec, data) = self
                .tensors
                .iter()
                .find(|(t, _)| t.name == name)
                .ok_or_else(|| CocaError::Format(format!("missing tensor {name}")))?;
            if spec.shape != s.shape {
                bail!(Format, "tensor {name} has shape {:?}, expected {:?}", spec.shape, s.shape);
            }
            tensors.push(data.clone());
        }
        ModelParams::from_tensors(&self.config, tensors)
    }

    pub fn has_tree(&self, prefix: &str) -> bool {
        self.tensors.iter().any(|(t, _)| t.name.starts_with(prefix))
    }

    pub fn model(&self) -> Result<Model<f32>> {
        let params = self.tree("")?;
        let expected = param_specs(&self.config).len();
        let model_tensors = self.tensors.iter().filter(|(t, _)| !t.name.starts_with("optim.")).count();
        if model_tensors != expected {
            bail!(Format, "checkpoint holds {model_tensors} model tensors, expected {expected}");
        }
        Model::from_params(self.config.clone(), params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut manifest = Vec::with_capacity(self.tensors.len());
        for (spec, data) in &self.tensors {
            if spec.len() != data.len() {
                bail!(Format, "tensor {} has {} elements for shape {:?}", spec.name, data.len(), spec.shape);
            }
            manifest.push(ManifestEntry {
                name: spec.name.clone(),
                shape: spec.shape.clone(),
                offset,
                len: data.len() as u64,
            });
            offset += 4 * data.len() as u64;
        }
        let header = Header {
            format: "coca-lab-checkpoint".into(),
            version: FORMAT_VERSION,
            config: self.config.clone(),
            step: self.step,
            rng_state: to_hex(&self.rng_state),
            metadata: self.metadata.clone(),
            tensors: manifest,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, data) in &self.tensors {
            for x in data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            bail!(Format, "not a checkpoint file (bad magic)");
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            bail!(Format, "unsupported checkpoint version {version}");
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let payload_start = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| CocaError::Format("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[20..payload_start])?;
        header.config.validate()?;
        let payload = &bytes[payload_start..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut expected_offset = 0u64;
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            if n as u64 != e.len || e.offset != expected_offset {
                bail!(Format, "manifest entry {} is inconsistent", e.name);
            }
            let start = e.offset as usize;
            let end = start + 4 * n;
            if end > payload.len() {
                bail!(Format, "payload of {} is truncated", e.name);
            }
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            expected_offset = end as u64;
            tensors.push((TensorSpec { name: e.name, shape: e.shape }, data));
        }
        if expected_offset as usize != payload.len() {
            bail!(Format, "trailing bytes after the last tensor");
        }
        Ok(Self {
            config: header.config,
            step: header.step,
            rng_state: from_hex(&header.rng_state)?,
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn from_hex(s: &str) -> Result<Vec<u8>> {
    if !s.len().is_multiple_of(2) {
        bail!(Format, "odd-length hex string");
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).map_err(|_| CocaError::Format("bad hex digit".into())))
        .collect()
}
