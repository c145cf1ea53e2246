//! Checkpoint file: one safetensors container.
//!
//! Tensor names are `backbone.<name>` for the frozen encoder,
//! `model.<name>` for trainable parameters and batch-norm statistics, and
//! `optim.m.<name>` / `optim.v.<name>` for AdamW moments. The single
//! metadata key `depthseg` holds [`CheckpointMeta`] as JSON.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{LogRow, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{DepthSeg, ModelConfig};

const META_KEY: &str = "depthseg";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: u32,
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub seed: u64,
    pub step: usize,
    pub total_steps: usize,
    pub backbone_checksum: String,
    pub log: Vec<LogRow>,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: HashMap<String, Tensor>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_string(&self.meta)
            .map_err(|e| Error::Checkpoint(format!("cannot encode metadata: {e}")))?;
        let info = HashMap::from([(META_KEY.to_string(), meta)]);
        safetensors::serialize(self.tensors.iter().map(|(k, v)| (k.as_str(), v)), Some(info))
            .map_err(|e| Error::Checkpoint(format!("cannot encode tensors: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) = safetensors::SafeTensors::read_metadata(bytes)
            .map_err(|e| Error::Checkpoint(format!("not a checkpoint: {e}")))?;
        let meta = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| Error::Checkpoint("checkpoint metadata missing".into()))?;
        let meta: CheckpointMeta = serde_json::from_str(meta)
            .map_err(|e| Error::Checkpoint(format!("bad checkpoint metadata: {e}")))?;
        if meta.format != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format {}", meta.format)));
        }
        let tensors = candle_core::safetensors::load_buffer(bytes, &Device::Cpu)
            .map_err(|e| Error::Checkpoint(format!("bad checkpoint tensors: {e}")))?;
        Ok(Self { meta, tensors })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Tensors under `prefix`, with the prefix stripped.
    pub fn scoped(&self, prefix: &str) -> HashMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|k| (k.to_string(), v.clone())))
            .collect()
    }

    /// Rebuilds the network with the stored weights.
    pub fn model(&self) -> Result<DepthSeg> {
        let mut cfg = self.meta.model.clone();
        cfg.backbone.pretrained_weights = None;
        let model = DepthSeg::new(&cfg, self.meta.seed)?;
        model.backbone().load_tensors(&self.scoped("backbone."))?;
        model.store().load(&self.scoped("model."), "")?;
        if model.backbone().checksum()? != self.meta.backbone_checksum {
            return Err(Error::Checkpoint("backbone checksum mismatch".into()));
        }
        Ok(model)
    }
}
