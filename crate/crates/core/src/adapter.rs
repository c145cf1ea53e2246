//! Lightweight per-level adapter: 1×1 conv → batch norm → ReLU on each
//! pyramid level, shape preserving.

use candle_core::Module;

use crate::backbone::{BackboneConfig, FeaturePyramid, FeatureSource, NUM_LEVELS};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdapterBlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
}

struct AdapterBlock {
    conv: Conv2d,
    bn: BatchNorm2d,
}

pub struct Adapter {
    blocks: Vec<AdapterBlock>,
    specs: [AdapterBlockSpec; NUM_LEVELS],
}

impl Adapter {
    pub fn new(p: &ParamStore, cfg: &BackboneConfig) -> Result<Self> {
        let specs = cfg.reassembly_channels.map(|c| AdapterBlockSpec {
            in_channels: c,
            out_channels: c,
        });
        let blocks = specs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let p = p.pp(format!("{i}"));
                Ok(AdapterBlock {
                    conv: Conv2d::new(&p.pp("conv"), s.in_channels, s.out_channels, 1, 1, 0, true)?,
                    bn: BatchNorm2d::new(&p.pp("bn"), s.out_channels)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks, specs })
    }

    pub fn specs(&self) -> &[AdapterBlockSpec; NUM_LEVELS] {
        &self.specs
    }

    pub fn adapt(&self, features: &FeaturePyramid, train: bool) -> Result<FeaturePyramid> {
        if features.source != FeatureSource::Encoder {
            return Err(Error::Contract("adapter expects encoder features".into()));
        }
        let channels = self.specs.map(|s| s.in_channels);
        features.check(Some(&channels))?;
        let levels = features
            .levels
            .iter()
            .zip(&self.blocks)
            .map(|(x, b)| Ok(b.bn.forward_t(&b.conv.forward(x)?, train)?.relu()?))
            .collect::<Result<Vec<_>>>()?;
        Ok(FeaturePyramid {
            levels,
            source: FeatureSource::Adapter,
        })
    }
}

/// Σ over levels of conv weight + bias (C² + C) and BN scale + shift (2C).
pub fn adapter_param_count(cfg: &BackboneConfig) -> usize {
    cfg.reassembly_channels
        .iter()
        .map(|&c| Conv2d::param_count(c, c, 1, true) + BatchNorm2d::param_count(c))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::vit_param_count;
    use candle_core::{DType, Device, Tensor};

    fn pyramid(fill: Option<f32>) -> FeaturePyramid {
        let cfg = BackboneConfig::tiny();
        let levels = (0..NUM_LEVELS)
            .map(|i| {
                let shape = (2, cfg.reassembly_channels[i], 16 >> i, 16 >> i);
                match fill {
                    Some(v) => Tensor::full(v, shape, &Device::Cpu).unwrap(),
                    None => Tensor::randn(0f32, 1f32, shape, &Device::Cpu).unwrap(),
                }
            })
            .collect();
        FeaturePyramid {
            levels,
            source: FeatureSource::Encoder,
        }
    }

    #[test]
    fn shapes_preserved_and_non_negative() {
        let adapter = Adapter::new(&ParamStore::new(0, true), &BackboneConfig::tiny()).unwrap();
        let input = pyramid(None);
        for train in [true, false] {
            let out = adapter.adapt(&input, train).unwrap();
            assert_eq!(out.source, FeatureSource::Adapter);
            for (a, b) in input.levels.iter().zip(&out.levels) {
                assert_eq!(a.dims(), b.dims());
                let min = b.min_all().unwrap().to_scalar::<f32>().unwrap();
                assert!(min >= 0.0);
            }
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let adapter = Adapter::new(&ParamStore::new(0, true), &BackboneConfig::tiny()).unwrap();
        let out = adapter.adapt(&pyramid(Some(0.0)), true).unwrap();
        for l in out.levels {
            let max = l.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
            assert_eq!(max, 0.0);
        }
    }

    #[test]
    fn rejects_wrong_level_count_and_channels() {
        let adapter = Adapter::new(&ParamStore::new(0, true), &BackboneConfig::tiny()).unwrap();
        let mut p = pyramid(None);
        p.levels.pop();
        assert!(matches!(adapter.adapt(&p, false), Err(Error::Contract(_))));
        let mut p = pyramid(None);
        p.levels[1] = Tensor::zeros((2, 63, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(adapter.adapt(&p, false), Err(Error::Contract(_))));
    }

    #[test]
    fn param_counts() {
        let hand = (32 * 33 + 2 * 32) + (64 * 65 + 2 * 64) + (128 * 129 + 2 * 128) + (256 * 257 + 2 * 256);
        assert_eq!(hand, 88_480);
        let cfg = BackboneConfig::tiny();
        assert_eq!(adapter_param_count(&cfg), 88_480);
        let store = ParamStore::new(0, true);
        Adapter::new(&store, &cfg).unwrap();
        assert_eq!(store.num_params(), 88_480);

        let mut one = BackboneConfig::tiny();
        one.reassembly_channels = [1, 1, 1, 1];
        assert_eq!(adapter_param_count(&one) / 4, 4);

        let large = BackboneConfig::vit_l();
        let ratio = adapter_param_count(&large) as f64 / vit_param_count(&large) as f64;
        assert!(ratio < 0.05, "{ratio}");
    }
}
