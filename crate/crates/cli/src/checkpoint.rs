//! Checkpoint container.
//!
//! Layout: the 8-byte magic `LSSLCKPT`, a little-endian `u64` header
//! length, a JSON header, then the tensor payload as row-major
//! little-endian `f32`. Each header entry records its byte offset into
//! the payload and its element count.

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use lssl_core::autodiff::{AdamW, Tensor};
use lssl_core::models::{init_bundle, Mode, ModelBundle};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

pub const MAGIC: &[u8; 8] = b"LSSLCKPT";
pub const FORMAT_VERSION: u32 = 1;

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub mode: Mode,
    /// Completed pretraining epochs.
    pub epoch: usize,
    pub config: ExperimentConfig,
    pub tensors: Vec<TensorEntry>,
    /// AdamW step count; present when the moments are stored as
    /// `adam.m.*` / `adam.v.*` tensors.
    pub optimizer_step: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub mode: Mode,
    pub epoch: usize,
    pub config: ExperimentConfig,
    pub tensors: Vec<NamedTensor>,
    pub optimizer_step: Option<u64>,
}

fn to_f32(t: &Tensor) -> Vec<f32> {
    t.data().iter().map(|&v| v as f32).collect()
}

impl Checkpoint {
    pub fn from_training(config: &ExperimentConfig, bundle: &ModelBundle, opt: Option<&AdamW>, epoch: usize) -> Checkpoint {
        let named = bundle.named_params();
        let mut tensors: Vec<NamedTensor> = named.iter().map(|(n, t)| NamedTensor { name: n.clone(), shape: t.shape().to_vec(), data: to_f32(t) }).collect();
        if let Some(opt) = opt {
            let (m, v) = opt.moments();
            for (prefix, moments) in [(ADAM_M, m), (ADAM_V, v)] {
                for ((n, t), mom) in named.iter().zip(moments) {
                    let data = mom.iter().map(|&x| x as f32).collect();
                    tensors.push(NamedTensor { name: format!("{prefix}{n}"), shape: t.shape().to_vec(), data });
                }
            }
        }
        Checkpoint { mode: bundle.mode, epoch, config: config.clone(), tensors, optimizer_step: opt.map(AdamW::step_count) }
    }

    fn find(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn tensor(&self, name: &str) -> Option<Tensor> {
        let t = self.find(name)?;
        Tensor::new(t.shape.clone(), t.data.iter().map(|&v| f64::from(v)).collect()).ok()
    }

    pub fn bundle(&self) -> Result<ModelBundle> {
        let mut b = init_bundle(self.mode, self.config.seed);
        b.load_named(|n| self.tensor(n))?;
        Ok(b)
    }

    /// The stored optimizer state for `bundle`, if any.
    pub fn optimizer(&self, bundle: &ModelBundle) -> Result<Option<AdamW>> {
        let Some(step) = self.optimizer_step else { return Ok(None) };
        let names: Vec<String> = bundle.named_params().into_iter().map(|(n, _)| n).collect();
        let take = |prefix: &str| -> Result<Vec<Vec<f64>>> {
            names
                .iter()
                .map(|n| {
                    let t = self.find(&format!("{prefix}{n}")).with_context(|| format!("missing optimizer tensor {prefix}{n}"))?;
                    Ok(t.data.iter().map(|&v| f64::from(v)).collect())
                })
                .collect()
        };
        let mut opt = AdamW::new(&bundle.param_sizes(), self.config.weight_decay);
        opt.restore(step, take(ADAM_M)?, take(ADAM_V)?)?;
        Ok(Some(opt))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for t in &self.tensors {
            ensure!(t.shape.iter().product::<usize>() == t.data.len(), "tensor {} has {} values for shape {:?}", t.name, t.data.len(), t.shape);
            entries.push(TensorEntry { name: t.name.clone(), shape: t.shape.clone(), offset, len: t.data.len() });
            offset += 4 * t.data.len();
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            mode: self.mode,
            epoch: self.epoch,
            config: self.config.clone(),
            tensors: entries,
            optimizer_step: self.optimizer_step,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            t.data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        ensure!(bytes.len() >= 16 && &bytes[..8] == MAGIC, "not a checkpoint file");
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).context("truncated checkpoint header")?;
        let header: Header = serde_json::from_slice(&bytes[16..body]).context("checkpoint header")?;
        if header.format_version != FORMAT_VERSION {
            bail!("unsupported checkpoint format version {}", header.format_version);
        }
        let payload = &bytes[body..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut used = 0;
        for e in header.tensors {
            ensure!(e.shape.iter().product::<usize>() == e.len, "tensor {} shape {:?} does not hold {} values", e.name, e.shape, e.len);
            let end = e.offset.checked_add(4 * e.len).filter(|&end| end <= payload.len()).with_context(|| format!("tensor {} overruns payload", e.name))?;
            let data = payload[e.offset..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            used += 4 * e.len;
            tensors.push(NamedTensor { name: e.name, shape: e.shape, data });
        }
        ensure!(used == payload.len(), "payload has {} bytes, header accounts for {used}", payload.len());
        Ok(Checkpoint { mode: header.mode, epoch: header.epoch, config: header.config, tensors, optimizer_step: header.optimizer_step })
    }

    /// Writes through a temporary file so an interrupted save leaves any
    /// previous checkpoint intact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?).with_context(|| format!("writing {}", tmp.display()))?;
        std::fs::rename(&tmp, path).with_context(|| format!("moving checkpoint to {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_bytes(&bytes).with_context(|| format!("loading {}", path.display()))
    }
}
