//! Depth prompter: encodes the three shallow depth maps into four
//! feature-aligned prompt maps ψ at strides 4, 8, 16, 32.

use candle_core::{Module, Tensor};

use crate::backbone::{BackboneConfig, NUM_LEVELS};
use crate::depth::DepthPyramid;
use crate::error::{Error, Result};
use crate::nn::{avg_pool, upsample_nearest, BatchNorm2d, Conv2d, ParamStore};

/// Four NCHW prompt maps; level i has stride 2^(i+2).
#[derive(Debug, Clone)]
pub struct PromptPyramid {
    pub prompts: Vec<Tensor>,
}

/// Prompt widths mirror the feature pyramid level for level.
pub fn prompt_channels(cfg: &BackboneConfig) -> [usize; NUM_LEVELS] {
    cfg.reassembly_channels
}

struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    fn new(p: &ParamStore, in_c: usize, out_c: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&p.pp("conv"), in_c, out_c, 3, stride, 1, false)?,
            bn: BatchNorm2d::new(&p.pp("bn"), out_c)?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.bn.forward_t(&self.conv.forward(x)?, train)
    }
}

/// out = skip(x) + transform(x); skip is the identity when shapes match,
/// otherwise pooling and/or a 1×1 projection.
struct DeepBlock {
    transform1: ConvBn,
    transform2: ConvBn,
    projection: Option<Conv2d>,
    stride: usize,
}

impl DeepBlock {
    fn new(p: &ParamStore, in_c: usize, out_c: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            transform1: ConvBn::new(&p.pp("transform1"), in_c, out_c, stride)?,
            transform2: ConvBn::new(&p.pp("transform2"), out_c, out_c, 1)?,
            projection: if in_c != out_c {
                Some(Conv2d::new(&p.pp("projection"), in_c, out_c, 1, 1, 0, false)?)
            } else {
                None
            },
            stride,
        })
    }

    fn skip(&self, x: &Tensor) -> Result<Tensor> {
        let x = avg_pool(x, self.stride)?;
        match &self.projection {
            Some(p) => Ok(p.forward(&x)?),
            None => Ok(x),
        }
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let t = self.transform1.forward(x, train)?.relu()?;
        let t = self.transform2.forward(&t, train)?;
        Ok((self.skip(x)? + t)?)
    }
}

pub struct Prompter {
    shallow: ConvBn,
    /// Lateral projections of the shallow output into deep blocks 1..3.
    laterals: Vec<Option<Conv2d>>,
    blocks: Vec<DeepBlock>,
}

impl Prompter {
    pub fn new(p: &ParamStore, cfg: &BackboneConfig) -> Result<Self> {
        let ch = prompt_channels(cfg);
        let shallow = ConvBn::new(&p.pp("shallow"), 3, ch[0], 2)?;
        let mut laterals = vec![None];
        let mut blocks = vec![DeepBlock::new(&p.pp("deep.0"), ch[0], ch[0], 1)?];
        for i in 1..NUM_LEVELS {
            laterals.push(if ch[i - 1] != ch[0] {
                Some(Conv2d::new(&p.pp(format!("lateral.{i}")), ch[0], ch[i - 1], 1, 1, 0, false)?)
            } else {
                None
            });
            blocks.push(DeepBlock::new(&p.pp(format!("deep.{i}")), ch[i - 1], ch[i], 2)?);
        }
        Ok(Self {
            shallow,
            laterals,
            blocks,
        })
    }

    /// Stacks the three depth maps on the stride-2 grid: the stride-1 map
    /// is average-pooled, the stride-4 map nearest-upsampled.
    fn stack(depth: &DepthPyramid) -> Result<Tensor> {
        depth.check()?;
        let fine = avg_pool(&depth.maps[0], 2)?;
        let coarse = upsample_nearest(&depth.maps[2], 2)?;
        Ok(Tensor::cat(&[&fine, &depth.maps[1], &coarse], 1)?)
    }

    pub fn encode_prompts(&self, depth: &DepthPyramid, train: bool) -> Result<PromptPyramid> {
        let (_, _, h, w) = depth.maps.first().ok_or_else(|| {
            Error::Contract("depth pyramid has no maps".into())
        })?.dims4()?;
        let stacked = Self::stack(depth)?;
        let shallow = self.shallow.forward(&stacked, train)?.relu()?;
        debug_assert_eq!(shallow.dims()[2] * 4, h);
        debug_assert_eq!(shallow.dims()[3] * 4, w);
        let mut prompts = Vec::with_capacity(NUM_LEVELS);
        let mut x = shallow.clone();
        for (i, block) in self.blocks.iter().enumerate() {
            if i > 0 {
                let lateral = avg_pool(&shallow, 1 << (i - 1))?;
                let lateral = match &self.laterals[i] {
                    Some(p) => p.forward(&lateral)?,
                    None => lateral,
                };
                x = (&x + lateral)?;
            }
            x = block.forward(&x, train)?;
            prompts.push(x.clone());
        }
        Ok(PromptPyramid { prompts })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn depth(h: usize, w: usize, zero: bool) -> DepthPyramid {
        DepthPyramid {
            maps: [1, 2, 4]
                .iter()
                .map(|s| {
                    let shape = (1, 1, h / s, w / s);
                    if zero {
                        Tensor::zeros(shape, DType::F32, &Device::Cpu).unwrap()
                    } else {
                        Tensor::rand(0f32, 1f32, shape, &Device::Cpu).unwrap()
                    }
                })
                .collect(),
        }
    }

    #[test]
    fn channels_mirror_reassembly() {
        assert_eq!(prompt_channels(&BackboneConfig::tiny()), [32, 64, 128, 256]);
        assert_eq!(prompt_channels(&BackboneConfig::vit_l()), [96, 192, 384, 768]);
        assert_eq!(prompt_channels(&BackboneConfig::vit_s()).len(), 4);
    }

    #[test]
    fn prompt_shapes_align_with_features() {
        let p = Prompter::new(&ParamStore::new(0, true), &BackboneConfig::tiny()).unwrap();
        let out = p.encode_prompts(&depth(64, 64, false), true).unwrap();
        let shapes: Vec<_> = out.prompts.iter().map(|t| t.dims().to_vec()).collect();
        assert_eq!(
            shapes,
            vec![
                vec![1, 32, 16, 16],
                vec![1, 64, 8, 8],
                vec![1, 128, 4, 4],
                vec![1, 256, 2, 2]
            ]
        );
    }

    #[test]
    fn zero_depth_gives_zero_prompts() {
        let p = Prompter::new(&ParamStore::new(4, true), &BackboneConfig::tiny()).unwrap();
        for train in [true, false] {
            let out = p.encode_prompts(&depth(64, 64, true), train).unwrap();
            for t in out.prompts {
                let max = t.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
                assert_eq!(max, 0.0);
            }
        }
    }

    #[test]
    fn sensitive_to_coarsest_map() {
        let p = Prompter::new(&ParamStore::new(1, true), &BackboneConfig::tiny()).unwrap();
        let a = depth(64, 64, false);
        let mut b = a.clone();
        b.maps[2] = (&b.maps[2] * 0.5).unwrap();
        let pa = p.encode_prompts(&a, false).unwrap();
        let pb = p.encode_prompts(&b, false).unwrap();
        for (x, y) in pa.prompts.iter().zip(&pb.prompts) {
            let d = (x - y).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
            assert!(d > 0.0);
        }
    }

    #[test]
    fn zeroed_transforms_make_first_block_identity() {
        let store = ParamStore::new(2, true);
        let p = Prompter::new(&store, &BackboneConfig::tiny()).unwrap();
        for (name, var) in store.trainable_vars() {
            if name.contains(".transform") && name.ends_with("conv.weight") {
                var.set(&var.zeros_like().unwrap()).unwrap();
            }
        }
        let x = Tensor::randn(0f32, 1f32, (1, 32, 16, 16), &Device::Cpu).unwrap();
        let y = p.blocks[0].forward(&x, true).unwrap();
        let d = (x - y).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(d, 0.0);
        // later blocks reduce to their skip path
        let x = Tensor::randn(0f32, 1f32, (1, 32, 16, 16), &Device::Cpu).unwrap();
        let y = p.blocks[1].forward(&x, true).unwrap();
        let s = p.blocks[1].skip(&x).unwrap();
        let d = (s - y).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn rejects_malformed_depth() {
        let p = Prompter::new(&ParamStore::new(0, true), &BackboneConfig::tiny()).unwrap();
        let mut d = depth(64, 64, false);
        d.maps.pop();
        assert!(matches!(p.encode_prompts(&d, false), Err(Error::Contract(_))));
    }
}
