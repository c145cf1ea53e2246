//! Semantic decoder: fuses image features f with depth prompts ψ level by
//! level, coarse to fine, and emits full-resolution class scores.

use candle_core::{Module, Tensor};

use crate::backbone::{BackboneConfig, FeaturePyramid, NUM_LEVELS};
use crate::data::LabelMask;
use crate::error::{Error, Result};
use crate::nn::{upsample_bilinear, BatchNorm2d, Conv2d, ParamStore};
use crate::prompter::PromptPyramid;

/// Pre-softmax class scores, (B, N, H, W).
#[derive(Debug, Clone)]
pub struct ClassLogits {
    pub scores: Tensor,
}

impl ClassLogits {
    pub fn num_classes(&self) -> Result<usize> {
        Ok(self.scores.dims4()?.1)
    }
}

/// Fusion of (f_i, ψ_i): a 1×1 projection of their channel concatenation,
/// stored as two column blocks so the ψ block can be absent.
struct Fuse {
    features: Conv2d,
    prompts: Option<Conv2d>,
}

impl Fuse {
    fn forward(&self, f: &Tensor, psi: Option<&Tensor>) -> Result<Tensor> {
        let y = self.features.forward(f)?;
        match (&self.prompts, psi) {
            (Some(w), Some(psi)) => {
                if psi.dims() != f.dims() {
                    return Err(Error::Contract(format!(
                        "prompt {:?} misaligned with features {:?}",
                        psi.dims(),
                        f.dims()
                    )));
                }
                Ok((y + w.forward(psi)?)?)
            }
            (None, Some(_)) => Err(Error::Contract(
                "decoder was built without a prompt path".into(),
            )),
            (_, None) => Ok(y),
        }
    }
}

struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBnRelu {
    fn new(p: &ParamStore, c: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&p.pp("conv"), c, c, 3, 1, 1, false)?,
            bn: BatchNorm2d::new(&p.pp("bn"), c)?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.bn.forward_t(&self.conv.forward(x)?, train)?.relu()?)
    }
}

pub struct SegDecoder {
    fuse: Vec<Fuse>,
    /// Width adapters from level k+1 to level k on the upsampled path.
    lateral: Vec<Conv2d>,
    layers: Vec<ConvBnRelu>,
    head: Conv2d,
    channels: [usize; NUM_LEVELS],
    num_classes: usize,
}

impl SegDecoder {
    pub fn new(
        p: &ParamStore,
        cfg: &BackboneConfig,
        num_classes: usize,
        with_prompts: bool,
    ) -> Result<Self> {
        let ch = cfg.reassembly_channels;
        let mut fuse = Vec::with_capacity(NUM_LEVELS);
        let mut layers = Vec::with_capacity(NUM_LEVELS);
        for (i, &c) in ch.iter().enumerate() {
            let fp = p.pp(format!("fuse.{i}"));
            fuse.push(Fuse {
                features: Conv2d::new(&fp.pp("features"), c, c, 1, 1, 0, true)?,
                prompts: if with_prompts {
                    Some(Conv2d::new(&fp.pp("prompts"), c, c, 1, 1, 0, false)?)
                } else {
                    None
                },
            });
            layers.push(ConvBnRelu::new(&p.pp(format!("layer.{i}")), c)?);
        }
        let lateral = (0..NUM_LEVELS - 1)
            .map(|k| Conv2d::new(&p.pp(format!("lateral.{k}")), ch[k + 1], ch[k], 1, 1, 0, false))
            .collect::<Result<Vec<_>>>()?;
        let head = Conv2d::new(&p.pp("head"), ch[0], num_classes, 1, 1, 0, true)?;
        Ok(Self {
            fuse,
            lateral,
            layers,
            head,
            channels: ch,
            num_classes,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn has_prompt_path(&self) -> bool {
        self.fuse[0].prompts.is_some()
    }

    /// Input layer on level 3, three intermediate layers for levels 2..0,
    /// then a 4× bilinear output layer projecting to class scores.
    pub fn decode_semantics(
        &self,
        f: &FeaturePyramid,
        psi: Option<&PromptPyramid>,
        train: bool,
    ) -> Result<ClassLogits> {
        f.check(Some(&self.channels))?;
        if let Some(psi) = psi {
            if psi.prompts.len() != NUM_LEVELS {
                return Err(Error::Contract(format!(
                    "prompt pyramid must have {NUM_LEVELS} levels, got {}",
                    psi.prompts.len()
                )));
            }
        }
        let prompt = |i: usize| psi.map(|p| &p.prompts[i]);
        let top = NUM_LEVELS - 1;
        let mut x = self.layers[top].forward(&self.fuse[top].forward(&f.levels[top], prompt(top))?, train)?;
        for k in (0..top).rev() {
            let up = self.lateral[k].forward(&upsample_bilinear(&x, 2)?)?;
            let fused = self.fuse[k].forward(&f.levels[k], prompt(k))?;
            x = self.layers[k].forward(&(up + fused)?, train)?;
        }
        let scores = self.head.forward(&upsample_bilinear(&x, 4)?)?;
        Ok(ClassLogits { scores })
    }
}

/// Per-pixel argmax, ties resolved towards the smallest class index.
pub fn predict_mask(logits: &ClassLogits) -> Result<Vec<LabelMask>> {
    let scores = logits.scores.to_dtype(candle_core::DType::F32)?;
    let (b, n, h, w) = scores.dims4()?;
    let data = scores.flatten_all()?.to_vec1::<f32>()?;
    let plane = h * w;
    (0..b)
        .map(|bi| {
            let base = bi * n * plane;
            let classes = ndarray::Array2::from_shape_fn((h, w), |(y, x)| {
                let px = y * w + x;
                let mut best = 0usize;
                let mut best_v = data[base + px];
                for c in 1..n {
                    let v = data[base + c * plane + px];
                    if v > best_v {
                        best = c;
                        best_v = v;
                    }
                }
                best as u8
            });
            LabelMask::new(classes)
        })
        .collect()
}
