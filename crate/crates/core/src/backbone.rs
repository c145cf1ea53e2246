//! Frozen plain-ViT encoder and the token-to-grid reassembly that turns its
//! tapped blocks into a four-level feature pyramid at strides 4, 8, 16, 32.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Module, Tensor};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{resize_bilinear, Conv2d, ConvTranspose2d, Init, LayerNorm, Linear, ParamStore};

/// Number of pyramid levels and their strides.
pub const NUM_LEVELS: usize = 4;
pub const LEVEL_STRIDES: [usize; NUM_LEVELS] = [4, 8, 16, 32];
/// Tile sides must be multiples of the coarsest stride.
pub const TILE_MULTIPLE: usize = 32;

const PIXEL_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const PIXEL_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneName {
    Tiny,
    VitS,
    VitB,
    VitL,
}

impl BackboneName {
    pub fn as_str(self) -> &'static str {
        match self {
            BackboneName::Tiny => "tiny",
            BackboneName::VitS => "vit_s",
            BackboneName::VitB => "vit_b",
            BackboneName::VitL => "vit_l",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(BackboneName::Tiny),
            "vit_s" => Ok(BackboneName::VitS),
            "vit_b" => Ok(BackboneName::VitB),
            "vit_l" => Ok(BackboneName::VitL),
            other => Err(Error::Config(format!("unknown backbone `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub name: BackboneName,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    /// Blocks whose outputs feed pyramid levels 0..3.
    pub tap_indices: [usize; NUM_LEVELS],
    /// Channel width of each pyramid level.
    pub reassembly_channels: [usize; NUM_LEVELS],
    /// Reference tile side the position embedding grid is sized for.
    pub image_size: usize,
    pub pretrained_weights: Option<PathBuf>,
}

impl BackboneConfig {
    pub fn tiny() -> Self {
        Self {
            name: BackboneName::Tiny,
            patch_size: 8,
            embed_dim: 64,
            depth: 8,
            num_heads: 4,
            tap_indices: [1, 3, 5, 7],
            reassembly_channels: [32, 64, 128, 256],
            image_size: 64,
            pretrained_weights: None,
        }
    }

    pub fn vit_s() -> Self {
        Self {
            name: BackboneName::VitS,
            patch_size: 16,
            embed_dim: 384,
            depth: 12,
            num_heads: 6,
            tap_indices: [2, 5, 8, 11],
            reassembly_channels: [48, 96, 192, 384],
            image_size: 512,
            pretrained_weights: None,
        }
    }

    pub fn vit_b() -> Self {
        Self {
            name: BackboneName::VitB,
            patch_size: 16,
            embed_dim: 768,
            depth: 12,
            num_heads: 12,
            tap_indices: [2, 5, 8, 11],
            reassembly_channels: [96, 192, 384, 768],
            image_size: 512,
            pretrained_weights: None,
        }
    }

    pub fn vit_l() -> Self {
        Self {
            name: BackboneName::VitL,
            patch_size: 16,
            embed_dim: 1024,
            depth: 24,
            num_heads: 16,
            tap_indices: [5, 11, 17, 23],
            reassembly_channels: [96, 192, 384, 768],
            image_size: 512,
            pretrained_weights: None,
        }
    }

    pub fn preset(name: BackboneName) -> Self {
        match name {
            BackboneName::Tiny => Self::tiny(),
            BackboneName::VitS => Self::vit_s(),
            BackboneName::VitB => Self::vit_b(),
            BackboneName::VitL => Self::vit_l(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if !p.is_power_of_two() || !(4..=TILE_MULTIPLE).contains(&p) {
            return Err(Error::Config(format!(
                "patch_size must be a power of two in [4, 32], got {p}"
            )));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.tap_indices.windows(2).any(|w| w[0] >= w[1])
            || self.tap_indices[NUM_LEVELS - 1] >= self.depth
        {
            return Err(Error::Config(format!(
                "tap_indices {:?} must be strictly increasing and below depth {}",
                self.tap_indices, self.depth
            )));
        }
        if self.reassembly_channels.contains(&0) {
            return Err(Error::Config(
                "reassembly_channels must all be positive".into(),
            ));
        }
        if self.image_size % p != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a multiple of patch_size {p}",
                self.image_size
            )));
        }
        Ok(())
    }

    fn pos_grid(&self) -> usize {
        self.image_size / self.patch_size
    }
}

/// An H×W×3 reflectance raster with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTile {
    pixels: Array3<f32>,
    tile_id: String,
}

impl ImageTile {
    pub fn new(pixels: Array3<f32>, tile_id: impl Into<String>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if c != 3 {
            return Err(Error::Input(format!("tile must have 3 bands, got {c}")));
        }
        check_tile_dims(h, w)?;
        if let Some(v) = pixels
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::Input(format!(
                "tile pixel value {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            pixels,
            tile_id: tile_id.into(),
        })
    }

    pub fn pixels(&self) -> &Array3<f32> {
        &self.pixels
    }

    pub fn tile_id(&self) -> &str {
        &self.tile_id
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    /// (1, 3, H, W) tensor.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        let (h, w, _) = self.pixels.dim();
        let data: Vec<f32> = self.pixels.iter().copied().collect();
        Ok(Tensor::from_vec(data, (h, w, 3), device)?
            .permute((2, 0, 1))?
            .unsqueeze(0)?
            .contiguous()?)
    }
}

pub fn check_tile_dims(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % TILE_MULTIPLE != 0 || w % TILE_MULTIPLE != 0 {
        return Err(Error::Input(format!(
            "tile dimensions {h}x{w} must be positive multiples of {TILE_MULTIPLE}"
        )));
    }
    Ok(())
}

/// Stacks tiles of equal size into a (B, 3, H, W) batch.
pub fn batch_tiles(tiles: &[&ImageTile], device: &Device) -> Result<Tensor> {
    let first = tiles
        .first()
        .ok_or_else(|| Error::Input("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut parts = Vec::with_capacity(tiles.len());
    for t in tiles {
        if t.height() != h || t.width() != w {
            return Err(Error::ShapeMismatch(format!(
                "batch mixes {h}x{w} and {}x{} tiles",
                t.height(),
                t.width()
            )));
        }
        parts.push(t.to_tensor(device)?);
    }
    Ok(Tensor::cat(&parts, 0)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    Encoder,
    Adapter,
}

/// Four NCHW feature maps; level i has stride 2^(i+2).
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
    pub source: FeatureSource,
}

impl FeaturePyramid {
    /// Checks level count, halving spatial sizes, and optionally channels.
    pub fn check(&self, channels: Option<&[usize; NUM_LEVELS]>) -> Result<()> {
        if self.levels.len() != NUM_LEVELS {
            return Err(Error::Contract(format!(
                "feature pyramid must have {NUM_LEVELS} levels, got {}",
                self.levels.len()
            )));
        }
        let (b, _, h0, w0) = self.levels[0].dims4()?;
        for (i, level) in self.levels.iter().enumerate() {
            let (bi, c, h, w) = level.dims4()?;
            if bi != b || h << i != h0 || w << i != w0 {
                return Err(Error::Contract(format!(
                    "pyramid level {i} has shape {:?}, inconsistent with level 0 {:?}",
                    level.dims(),
                    self.levels[0].dims()
                )));
            }
            if let Some(ch) = channels {
                if c != ch[i] {
                    return Err(Error::Contract(format!(
                        "pyramid level {i} has {c} channels, expected {}",
                        ch[i]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Spatial size of the tile the pyramid was computed from.
    pub fn tile_size(&self) -> Result<(usize, usize)> {
        let (_, _, h, w) = self.levels[0].dims4()?;
        Ok((h * LEVEL_STRIDES[0], w * LEVEL_STRIDES[0]))
    }
}

struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    num_heads: usize,
}

impl Block {
    fn new(p: &ParamStore, dim: usize, num_heads: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&p.pp("norm1"), dim)?,
            qkv: Linear::new(&p.pp("attn.qkv"), dim, 3 * dim)?,
            proj: Linear::new(&p.pp("attn.proj"), dim, dim)?,
            norm2: LayerNorm::new(&p.pp("norm2"), dim)?,
            fc1: Linear::new(&p.pp("mlp.fc1"), dim, 4 * dim)?,
            fc2: Linear::new(&p.pp("mlp.fc2"), 4 * dim, dim)?,
            num_heads,
        })
    }

    fn attention(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let hd = d / self.num_heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, t, 3, self.num_heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?)? / (hd as f64).sqrt())?;
        let attn = candle_nn::ops::softmax_last_dim(&scores)?;
        let out = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, t, d))?;
        Ok(self.proj.forward(&out)?)
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attention(&self.norm1.forward(x)?)?)?;
        let h = self.fc1.forward(&self.norm2.forward(&x)?)?.gelu_erf()?;
        Ok((&x + self.fc2.forward(&h)?)?)
    }
}

/// Plain ViT with a class token and a learned, resizable position grid.
struct Vit {
    patch_embed: Conv2d,
    cls_token: Tensor,
    pos_embed: Tensor,
    blocks: Vec<Block>,
    cfg: BackboneConfig,
}

impl Vit {
    fn new(p: &ParamStore, cfg: &BackboneConfig) -> Result<Self> {
        let d = cfg.embed_dim;
        let ps = cfg.patch_size;
        let fan_in = 3 * ps * ps;
        let patch_embed = Conv2d::with_init(
            &p.pp("patch_embed"),
            3,
            d,
            ps,
            ps,
            Init::Normal {
                std: 1.0 / (fan_in as f64).sqrt(),
            },
        )?;
        let g = cfg.pos_grid();
        let cls_token = p.param("cls_token", &[1, 1, d], Init::TruncNormal { std: 0.02 })?;
        let pos_embed = p.param("pos_embed", &[1, 1 + g * g, d], Init::TruncNormal { std: 0.02 })?;
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(&p.pp(format!("blocks.{i}")), d, cfg.num_heads))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            cfg: cfg.clone(),
        })
    }

    fn position_embedding(&self, gh: usize, gw: usize) -> Result<Tensor> {
        let g = self.cfg.pos_grid();
        let d = self.cfg.embed_dim;
        let cls = self.pos_embed.narrow(1, 0, 1)?;
        let grid = self.pos_embed.narrow(1, 1, g * g)?;
        if gh == g && gw == g {
            return Ok(self.pos_embed.clone());
        }
        let grid = grid.reshape((1, g, g, d))?.permute((0, 3, 1, 2))?;
        let grid = resize_bilinear(&grid, gh, gw)?
            .permute((0, 2, 3, 1))?
            .reshape((1, gh * gw, d))?;
        Ok(Tensor::cat(&[cls, grid], 1)?)
    }

    /// Patch tokens (class token stripped) after each tap block, as (B, T, D).
    fn tapped_tokens(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let device = images.device();
        let mean = Tensor::new(&PIXEL_MEAN, device)?.reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&PIXEL_STD, device)?.reshape((1, 3, 1, 1))?;
        let x = images.broadcast_sub(&mean)?.broadcast_div(&std)?;
        let x = self.patch_embed.forward(&x)?;
        let (b, d, gh, gw) = x.dims4()?;
        let x = x.flatten_from(2)?.transpose(1, 2)?;
        let cls = self.cls_token.broadcast_as((b, 1, d))?;
        let mut x = Tensor::cat(&[cls, x], 1)?
            .broadcast_add(&self.position_embedding(gh, gw)?)?;
        let mut taps = Vec::with_capacity(NUM_LEVELS);
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(&x)?;
            if self.cfg.tap_indices.contains(&i) {
                taps.push(x.narrow(1, 1, gh * gw)?);
            }
            if i == self.cfg.tap_indices[NUM_LEVELS - 1] {
                break;
            }
        }
        Ok(taps)
    }
}

enum Resample {
    Up(ConvTranspose2d),
    Identity,
    Down(Conv2d),
}

/// Projects tokens to a level's width and resamples the patch grid to the
/// level's stride.
struct ReassembleLevel {
    project: Conv2d,
    resample: Resample,
}

impl ReassembleLevel {
    fn new(p: &ParamStore, cfg: &BackboneConfig, level: usize) -> Result<Self> {
        let c = cfg.reassembly_channels[level];
        let stride = LEVEL_STRIDES[level];
        let project = Conv2d::new(&p.pp("project"), cfg.embed_dim, c, 1, 1, 0, true)?;
        let resample = match cfg.patch_size.cmp(&stride) {
            std::cmp::Ordering::Greater => {
                Resample::Up(ConvTranspose2d::new(&p.pp("resample"), c, c, cfg.patch_size / stride)?)
            }
            std::cmp::Ordering::Equal => Resample::Identity,
            std::cmp::Ordering::Less => {
                let k = stride / cfg.patch_size;
                Resample::Down(Conv2d::new(&p.pp("resample"), c, c, k, k, 0, true)?)
            }
        };
        Ok(Self { project, resample })
    }

    fn forward(&self, grid: &Tensor) -> Result<Tensor> {
        let x = self.project.forward(grid)?;
        Ok(match &self.resample {
            Resample::Up(m) => m.forward(&x)?,
            Resample::Identity => x,
            Resample::Down(m) => m.forward(&x)?,
        })
    }
}

/// Frozen encoder: ViT plus reassembly. Holds only detached tensors.
pub struct Backbone {
    vit: Vit,
    reassemble: Vec<ReassembleLevel>,
    store: ParamStore,
    cfg: BackboneConfig,
}

impl Backbone {
    /// Builds the encoder, randomly initialised from `seed`, then overlays
    /// `cfg.pretrained_weights` when set.
    pub fn new(cfg: &BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(seed, false);
        let vit = Vit::new(&store.pp("vit"), cfg)?;
        let reassemble = (0..NUM_LEVELS)
            .map(|l| ReassembleLevel::new(&store.pp(format!("reassemble.{l}")), cfg, l))
            .collect::<Result<Vec<_>>>()?;
        let backbone = Self {
            vit,
            reassemble,
            store,
            cfg: cfg.clone(),
        };
        if let Some(path) = &cfg.pretrained_weights {
            backbone.load_weights(path)?;
        }
        Ok(backbone)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Loads a safetensors weight file. Every `vit.*` tensor must be
    /// present; `reassemble.*` tensors are loaded when the file has them.
    pub fn load_weights(&self, path: &Path) -> Result<()> {
        let tensors = candle_core::safetensors::load(path, &Device::Cpu).map_err(|e| {
            Error::Config(format!("cannot load weights `{}`: {e}", path.display()))
        })?;
        self.load_tensors(&tensors)
    }

    pub fn load_tensors(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        self.store.load(tensors, "vit.")?;
        if tensors.keys().any(|k| k.starts_with("reassemble.")) {
            self.store.load(tensors, "reassemble.")?;
        }
        Ok(())
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        let map: HashMap<String, Tensor> = self.store.params().into_iter().collect();
        candle_core::safetensors::save(&map, path)
            .map_err(|e| Error::Config(format!("cannot save weights `{}`: {e}", path.display())))
    }

    /// Tokens after each tap block, class token stripped, plus the patch grid size.
    pub fn tokens(&self, images: &Tensor) -> Result<(Vec<Tensor>, (usize, usize))> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(Error::Input(format!("expected 3 bands, got {c}")));
        }
        check_tile_dims(h, w)?;
        if h < self.cfg.patch_size || w < self.cfg.patch_size {
            return Err(Error::Input(format!(
                "tile {h}x{w} smaller than patch size {}",
                self.cfg.patch_size
            )));
        }
        let images = images.to_dtype(DType::F32)?.detach();
        let taps = self.vit.tapped_tokens(&images)?;
        Ok((taps, (h / self.cfg.patch_size, w / self.cfg.patch_size)))
    }

    /// Maps a (B, T, D) token sequence on a `grid` patch lattice to the
    /// spatial map of pyramid `level`.
    pub fn reassemble(&self, tokens: &Tensor, level: usize, grid: (usize, usize)) -> Result<Tensor> {
        if level >= NUM_LEVELS {
            return Err(Error::Input(format!("level {level} out of range")));
        }
        let (b, t, d) = tokens.dims3()?;
        let (gh, gw) = grid;
        if t != gh * gw || d != self.cfg.embed_dim {
            return Err(Error::Input(format!(
                "token tensor ({t}, {d}) does not match a {gh}x{gw} grid of width {}",
                self.cfg.embed_dim
            )));
        }
        let grid = tokens.transpose(1, 2)?.contiguous()?.reshape((b, d, gh, gw))?;
        self.reassemble[level].forward(&grid)
    }

    /// Runs the encoder on a (B, 3, H, W) batch.
    pub fn extract_features(&self, images: &Tensor) -> Result<FeaturePyramid> {
        let (taps, grid) = self.tokens(images)?;
        let levels = taps
            .iter()
            .enumerate()
            .map(|(l, t)| Ok(self.reassemble(t, l, grid)?.detach()))
            .collect::<Result<Vec<_>>>()?;
        let pyramid = FeaturePyramid {
            levels,
            source: FeatureSource::Encoder,
        };
        pyramid.check(Some(&self.cfg.reassembly_channels))?;
        Ok(pyramid)
    }

    pub fn extract_features_tile(&self, tile: &ImageTile) -> Result<FeaturePyramid> {
        self.extract_features(&tile.to_tensor(&Device::Cpu)?)
    }

    pub fn vit_param_count(&self) -> usize {
        self.store.count_with_prefix("vit")
    }

    pub fn reassemble_param_count(&self) -> usize {
        self.store.count_with_prefix("reassemble")
    }

    pub fn checksum(&self) -> Result<String> {
        self.store.checksum()
    }
}

/// Parameter count of the ViT encoder described by `cfg`, without building it.
pub fn vit_param_count(cfg: &BackboneConfig) -> usize {
    let d = cfg.embed_dim;
    let p = cfg.patch_size;
    let g = cfg.pos_grid();
    let patch = 3 * p * p * d + d;
    let tokens = d + (1 + g * g) * d;
    let block = 2 * (2 * d) + (3 * d * d + 3 * d) + (d * d + d) + (4 * d * d + 4 * d) + (4 * d * d + d);
    patch + tokens + cfg.depth * block
}

/// Parameter count of the four reassembly heads described by `cfg`.
pub fn reassemble_param_count(cfg: &BackboneConfig) -> usize {
    (0..NUM_LEVELS)
        .map(|l| {
            let c = cfg.reassembly_channels[l];
            let stride = LEVEL_STRIDES[l];
            let project = Conv2d::param_count(cfg.embed_dim, c, 1, true);
            let resample = match cfg.patch_size.cmp(&stride) {
                std::cmp::Ordering::Greater => {
                    let k = cfg.patch_size / stride;
                    c * c * k * k + c
                }
                std::cmp::Ordering::Equal => 0,
                std::cmp::Ordering::Less => {
                    let k = stride / cfg.patch_size;
                    c * c * k * k + c
                }
            };
            project + resample
        })
        .sum()
}
