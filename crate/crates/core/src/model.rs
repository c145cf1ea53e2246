//! Full network: frozen encoder, optional adapter, optional depth branch
//! with prompter, and the semantic decoder.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::adapter::Adapter;
use crate::backbone::{batch_tiles, Backbone, BackboneConfig, FeaturePyramid, ImageTile};
use crate::data::{LabelMask, NUM_CLASSES};
use crate::decoder::{predict_mask, ClassLogits, SegDecoder};
use crate::depth::{DepthDecoder, DepthPyramid};
use crate::error::Result;
use crate::nn::ParamStore;
use crate::prompter::Prompter;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub adapter_enabled: bool,
    /// Also controls the depth branch: without prompts there is no depth
    /// pathway at all.
    pub prompter_enabled: bool,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn new(backbone: BackboneConfig, adapter_enabled: bool, prompter_enabled: bool) -> Self {
        Self {
            backbone,
            adapter_enabled,
            prompter_enabled,
            num_classes: NUM_CLASSES,
        }
    }
}

pub struct ModelOutput {
    pub depth: Option<DepthPyramid>,
    pub logits: ClassLogits,
}

/// One row of the parameter report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub module: String,
    pub count: usize,
    pub trainable: bool,
}

pub struct DepthSeg {
    cfg: ModelConfig,
    backbone: Backbone,
    store: ParamStore,
    adapter: Option<Adapter>,
    depth: Option<DepthDecoder>,
    prompter: Option<Prompter>,
    decoder: SegDecoder,
}

impl DepthSeg {
    /// Every trainable parameter is seeded from `seed` and its own name, so
    /// modules shared between configurations start identical.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let backbone = Backbone::new(&cfg.backbone, seed)?;
        let store = ParamStore::new(seed, true);
        let adapter = cfg
            .adapter_enabled
            .then(|| Adapter::new(&store.pp("adapter"), &cfg.backbone))
            .transpose()?;
        let (depth, prompter) = if cfg.prompter_enabled {
            (
                Some(DepthDecoder::new(&store.pp("depth"), &cfg.backbone)?),
                Some(Prompter::new(&store.pp("prompter"), &cfg.backbone)?),
            )
        } else {
            (None, None)
        };
        let decoder = SegDecoder::new(
            &store.pp("decoder"),
            &cfg.backbone,
            cfg.num_classes,
            cfg.prompter_enabled,
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            backbone,
            store,
            adapter,
            depth,
            prompter,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    /// Trainable parameters and batch-norm statistics.
    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn has_depth_branch(&self) -> bool {
        self.depth.is_some()
    }

    pub fn encode(&self, images: &Tensor) -> Result<FeaturePyramid> {
        self.backbone.extract_features(images)
    }

    /// Everything after the frozen encoder.
    pub fn forward_features(&self, encoded: &FeaturePyramid, train: bool) -> Result<ModelOutput> {
        let adapted;
        let f = match &self.adapter {
            Some(a) => {
                adapted = a.adapt(encoded, train)?;
                &adapted
            }
            None => encoded,
        };
        let (depth, prompts) = match (&self.depth, &self.prompter) {
            (Some(d), Some(p)) => {
                let depth = d.decode_depth(f)?;
                let prompts = p.encode_prompts(&depth, train)?;
                (Some(depth), Some(prompts))
            }
            _ => (None, None),
        };
        let logits = self.decoder.decode_semantics(f, prompts.as_ref(), train)?;
        Ok(ModelOutput { depth, logits })
    }

    pub fn forward(&self, images: &Tensor, train: bool) -> Result<ModelOutput> {
        self.forward_features(&self.encode(images)?, train)
    }

    /// Inference-mode masks for equally sized tiles.
    pub fn predict(&self, tiles: &[&ImageTile]) -> Result<Vec<LabelMask>> {
        let images = batch_tiles(tiles, &Device::Cpu)?;
        predict_mask(&self.forward(&images, false)?.logits)
    }

    /// Parameter counts per module. `backbone` is the ViT proper and
    /// `backbone.reassemble` its frozen token-to-map projections.
    pub fn parameter_report(&self) -> Vec<ParamEntry> {
        let mut out = vec![
            ParamEntry {
                module: "backbone".into(),
                count: self.backbone.vit_param_count(),
                trainable: false,
            },
            ParamEntry {
                module: "backbone.reassemble".into(),
                count: self.backbone.reassemble_param_count(),
                trainable: false,
            },
        ];
        for module in ["adapter", "depth", "prompter", "decoder"] {
            let count = self.store.count_with_prefix(module);
            if count > 0 {
                out.push(ParamEntry {
                    module: module.into(),
                    count,
                    trainable: true,
                });
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::adapter_param_count;
    use crate::backbone::vit_param_count;

    fn tiles(n: usize) -> Vec<ImageTile> {
        (0..n)
            .map(|i| {
                ImageTile::new(
                    ndarray::Array3::from_shape_fn((64, 64, 3), |(y, x, c)| ((y + 2 * x + c + i) % 17) as f32 / 16.0),
                    format!("t{i}"),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn toggles_shape_the_graph() {
        for (adapter, prompter) in [(false, false), (true, false), (false, true), (true, true)] {
            let m = DepthSeg::new(&ModelConfig::new(BackboneConfig::tiny(), adapter, prompter), 0).unwrap();
            let t = tiles(2);
            let images = batch_tiles(&t.iter().collect::<Vec<_>>(), &Device::Cpu).unwrap();
            let out = m.forward(&images, true).unwrap();
            assert_eq!(out.logits.scores.dims(), &[2, NUM_CLASSES, 64, 64]);
            assert_eq!(out.depth.is_some(), prompter);
            let report = m.parameter_report();
            assert_eq!(report.iter().any(|e| e.module == "adapter"), adapter);
            assert_eq!(report.iter().any(|e| e.module == "prompter"), prompter);
            assert_eq!(report.iter().any(|e| e.module == "depth"), prompter);
        }
    }

    #[test]
    fn report_counts_and_trainability() {
        let cfg = ModelConfig::new(BackboneConfig::tiny(), true, true);
        let m = DepthSeg::new(&cfg, 3).unwrap();
        let report = m.parameter_report();
        let get = |name: &str| report.iter().find(|e| e.module == name).unwrap();
        assert_eq!(get("backbone").count, vit_param_count(&cfg.backbone));
        assert_eq!(get("adapter").count, adapter_param_count(&cfg.backbone));
        for e in &report {
            assert_eq!(e.trainable, !e.module.starts_with("backbone"), "{}", e.module);
        }
        let trainable: usize = report.iter().filter(|e| e.trainable).map(|e| e.count).sum();
        assert_eq!(trainable, m.store().num_params());
    }

    #[test]
    fn shared_modules_start_identical_across_toggles() {
        let a = DepthSeg::new(&ModelConfig::new(BackboneConfig::tiny(), true, true), 5).unwrap();
        let b = DepthSeg::new(&ModelConfig::new(BackboneConfig::tiny(), true, false), 5).unwrap();
        let pa: std::collections::HashMap<_, _> = a.store().params().into_iter().collect();
        for (name, t) in b.store().params() {
            if name.starts_with("adapter") {
                let d = (&pa[&name] - &t).unwrap().abs().unwrap().max_all().unwrap();
                assert_eq!(d.to_scalar::<f32>().unwrap(), 0.0, "{name}");
            }
        }
        assert_eq!(a.backbone().checksum().unwrap(), b.backbone().checksum().unwrap());
    }

    #[test]
    fn predict_gives_legal_masks() {
        let m = DepthSeg::new(&ModelConfig::new(BackboneConfig::tiny(), true, true), 1).unwrap();
        let t = tiles(1);
        let masks = m.predict(&[&t[0]]).unwrap();
        assert_eq!(masks[0].dim(), (64, 64));
        assert!(masks[0].classes().iter().all(|&c| (c as usize) < NUM_CLASSES));
    }
}
