//! Depth branch: a DPT-style fusion decoder emitting depth maps at strides
//! 1, 2 and 4, plus the pseudo-label plumbing that supervises it.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{Module, Tensor};
use ndarray::Array2;

use crate::backbone::{BackboneConfig, FeaturePyramid, NUM_LEVELS};
use crate::error::{Error, Result};
use crate::nn::{upsample_bilinear, Conv2d, Init, ParamStore};

/// Strides of the three depth maps, finest first.
pub const DEPTH_STRIDES: [usize; 3] = [1, 2, 4];

/// Three single-channel depth maps, (B, 1, H/s, W/s) for s in [`DEPTH_STRIDES`].
#[derive(Debug, Clone)]
pub struct DepthPyramid {
    pub maps: Vec<Tensor>,
}

impl DepthPyramid {
    pub fn check(&self) -> Result<()> {
        if self.maps.len() != DEPTH_STRIDES.len() {
            return Err(Error::Contract(format!(
                "depth pyramid must have 3 maps, got {}",
                self.maps.len()
            )));
        }
        let (b, c, h, w) = self.maps[0].dims4()?;
        for (i, (m, s)) in self.maps.iter().zip(DEPTH_STRIDES).enumerate() {
            let (bi, ci, hi, wi) = m.dims4()?;
            if bi != b || ci != 1 || c != 1 || hi * s != h || wi * s != w {
                return Err(Error::Contract(format!(
                    "depth map {i} has shape {:?}, inconsistent with finest {:?}",
                    m.dims(),
                    self.maps[0].dims()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    TeacherFile,
    SyntheticOracle,
}

/// A teacher's relative depth for one tile.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub tile_id: String,
    pub depth: Array2<f32>,
    pub provenance: Provenance,
}

/// Source of pseudo-labels keyed by tile id. Implementations are read-only
/// after construction.
pub trait PseudoLabelProvider: Send + Sync {
    fn lookup(&self, tile_id: &str) -> Result<PseudoLabel>;

    fn contains(&self, tile_id: &str) -> bool {
        self.lookup(tile_id).is_ok()
    }
}

/// Provider backed by a map held in memory, e.g. the synthetic generator's
/// height fields.
#[derive(Debug, Clone, Default)]
pub struct InMemoryProvider {
    labels: HashMap<String, PseudoLabel>,
}

impl InMemoryProvider {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, label: PseudoLabel) -> Result<()> {
        check_finite(&label.depth)?;
        self.labels.insert(label.tile_id.clone(), label);
        Ok(())
    }

    /// Wraps generator height maps as oracle pseudo-labels.
    pub fn from_oracle<I>(heights: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, Array2<f32>)>,
    {
        let mut p = Self::new();
        for (tile_id, depth) in heights {
            p.insert(PseudoLabel {
                tile_id,
                depth,
                provenance: Provenance::SyntheticOracle,
            })?;
        }
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl PseudoLabelProvider for InMemoryProvider {
    fn lookup(&self, tile_id: &str) -> Result<PseudoLabel> {
        self.labels
            .get(tile_id)
            .cloned()
            .ok_or_else(|| Error::MissingLabel(tile_id.to_string()))
    }

    fn contains(&self, tile_id: &str) -> bool {
        self.labels.contains_key(tile_id)
    }
}

/// Provider reading `<dir>/<tile_id>_depth.png` 16-bit rasters, loaded
/// eagerly at construction.
#[derive(Debug, Clone)]
pub struct FileProvider {
    dir: PathBuf,
    inner: InMemoryProvider,
}

impl FileProvider {
    pub fn open(dir: &Path) -> Result<Self> {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut inner = InMemoryProvider::new();
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        paths.sort();
        for path in paths {
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
                continue;
            };
            let Some(tile_id) = name.strip_suffix("_depth.png") else {
                continue;
            };
            inner.insert(PseudoLabel {
                tile_id: tile_id.to_string(),
                depth: crate::data::io::read_depth_png(&path)?,
                provenance: Provenance::TeacherFile,
            })?;
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            inner,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn len(&self) -> usize {
        self.inner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.is_empty()
    }
}

impl PseudoLabelProvider for FileProvider {
    fn lookup(&self, tile_id: &str) -> Result<PseudoLabel> {
        self.inner.lookup(tile_id)
    }

    fn contains(&self, tile_id: &str) -> bool {
        self.inner.contains(tile_id)
    }
}

fn check_finite(map: &Array2<f32>) -> Result<()> {
    if let Some(v) = map.iter().find(|v| !v.is_finite()) {
        return Err(Error::Input(format!("non-finite depth value {v}")));
    }
    Ok(())
}

/// Min-max normalisation into [0, 1]; a constant map becomes all zeros.
pub fn normalize_depth(raw: &Array2<f32>) -> Result<Array2<f32>> {
    check_finite(raw)?;
    let (lo, hi) = raw
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if raw.is_empty() || hi <= lo {
        return Ok(Array2::zeros(raw.dim()));
    }
    let range = hi - lo;
    Ok(raw.mapv(|v| ((v - lo) / range).clamp(0.0, 1.0)))
}

/// Area-average downsampling by an integer factor.
pub fn area_downsample(map: &Array2<f32>, factor: usize) -> Result<Array2<f32>> {
    let (h, w) = map.dim();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Input(format!(
            "{h}x{w} map not divisible by factor {factor}"
        )));
    }
    if factor == 1 {
        return Ok(map.clone());
    }
    let area = (factor * factor) as f64;
    Ok(Array2::from_shape_fn((h / factor, w / factor), |(i, j)| {
        let mut s = 0.0f64;
        for di in 0..factor {
            for dj in 0..factor {
                s += map[[i * factor + di, j * factor + dj]] as f64;
            }
        }
        (s / area) as f32
    }))
}

/// A normalised pseudo-label resampled to every depth stride, finest first.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelPyramid {
    pub tile_id: String,
    pub maps: Vec<Array2<f32>>,
}

/// Looks up, normalises and area-resamples the pseudo-label for `tile_id`.
pub fn fetch_pseudo_label(
    provider: &dyn PseudoLabelProvider,
    tile_id: &str,
) -> Result<PseudoLabelPyramid> {
    let label = provider.lookup(tile_id)?;
    let norm = normalize_depth(&label.depth)?;
    let maps = DEPTH_STRIDES
        .iter()
        .map(|&s| area_downsample(&norm, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(PseudoLabelPyramid {
        tile_id: tile_id.to_string(),
        maps,
    })
}

/// Pre-activation residual conv unit.
struct ResidualConvUnit {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResidualConvUnit {
    fn new(p: &ParamStore, c: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&p.pp("conv1"), c, c, 3, 1, 1, true)?,
            conv2: Conv2d::new(&p.pp("conv2"), c, c, 3, 1, 1, true)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&x.relu()?)?;
        let h = self.conv2.forward(&h.relu()?)?;
        Ok((x + h)?)
    }
}

/// Fuses a lateral feature into the running coarse path, then upsamples 2×.
struct FusionBlock {
    lateral: Option<ResidualConvUnit>,
    refine: ResidualConvUnit,
    out: Conv2d,
}

impl FusionBlock {
    fn new(p: &ParamStore, c: usize, has_path: bool) -> Result<Self> {
        Ok(Self {
            lateral: if has_path {
                Some(ResidualConvUnit::new(&p.pp("lateral"), c)?)
            } else {
                None
            },
            refine: ResidualConvUnit::new(&p.pp("refine"), c)?,
            out: Conv2d::new(&p.pp("out"), c, c, 1, 1, 0, true)?,
        })
    }

    fn forward(&self, skip: &Tensor, path: Option<&Tensor>) -> Result<Tensor> {
        let x = match (&self.lateral, path) {
            (Some(l), Some(path)) => (path + l.forward(skip)?)?,
            _ => skip.clone(),
        };
        let x = self.refine.forward(&x)?;
        Ok(self.out.forward(&upsample_bilinear(&x, 2)?)?)
    }
}

/// Emits one sigmoid-bounded depth map at twice the input resolution.
struct DepthHead {
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
}

impl DepthHead {
    fn new(p: &ParamStore, c: usize) -> Result<Self> {
        let half = (c / 2).max(1);
        Ok(Self {
            conv1: Conv2d::new(&p.pp("conv1"), c, half, 3, 1, 1, true)?,
            conv2: Conv2d::new(&p.pp("conv2"), half, half, 3, 1, 1, true)?,
            // zero-initialised: every map starts at 0.5
            conv3: Conv2d::with_init(&p.pp("conv3"), half, 1, 1, 1, Init::Zeros)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = upsample_bilinear(&self.conv1.forward(x)?, 2)?;
        let h = self.conv2.forward(&h)?.relu()?;
        Ok(candle_nn::ops::sigmoid(&self.conv3.forward(&h)?)?)
    }
}

/// Progressive coarse-to-fine fusion decoder over a feature pyramid.
pub struct DepthDecoder {
    project: Vec<Conv2d>,
    fusion: Vec<FusionBlock>,
    heads: Vec<DepthHead>,
    channels: [usize; NUM_LEVELS],
}

impl DepthDecoder {
    pub fn new(p: &ParamStore, cfg: &BackboneConfig) -> Result<Self> {
        let features = cfg.reassembly_channels[0];
        let project = (0..NUM_LEVELS)
            .map(|i| {
                Conv2d::new(
                    &p.pp(format!("project.{i}")),
                    cfg.reassembly_channels[i],
                    features,
                    3,
                    1,
                    1,
                    false,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        // fusion.3 starts the path at the coarsest level
        let fusion = (0..NUM_LEVELS)
            .map(|i| FusionBlock::new(&p.pp(format!("fusion.{i}")), features, i < NUM_LEVELS - 1))
            .collect::<Result<Vec<_>>>()?;
        let heads = (0..DEPTH_STRIDES.len())
            .map(|i| DepthHead::new(&p.pp(format!("head.{i}")), features))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            project,
            fusion,
            heads,
            channels: cfg.reassembly_channels,
        })
    }

    pub fn decode_depth(&self, features: &FeaturePyramid) -> Result<DepthPyramid> {
        features.check(Some(&self.channels))?;
        let mut path: Option<Tensor> = None;
        // fusion outputs at strides 16, 8, 4, 2 for levels 3, 2, 1, 0
        let mut outputs = Vec::with_capacity(NUM_LEVELS);
        for level in (0..NUM_LEVELS).rev() {
            let skip = self.project[level].forward(&features.levels[level])?;
            let out = self.fusion[level].forward(&skip, path.as_ref())?;
            outputs.push(out.clone());
            path = Some(out);
        }
        // the last three stages (strides 8, 4, 2) feed heads at strides 4, 2, 1
        let maps = (0..DEPTH_STRIDES.len())
            .map(|i| self.heads[i].forward(&outputs[NUM_LEVELS - 1 - i]))
            .collect::<Result<Vec<_>>>()?;
        let pyramid = DepthPyramid { maps };
        pyramid.check()?;
        Ok(pyramid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::FeatureSource;
    use candle_core::Device;
    use ndarray::array;

    #[test]
    fn normalize_examples() {
        let out = normalize_depth(&array![[2.0f32, 4.0, 6.0]]).unwrap();
        assert_eq!(out, array![[0.0f32, 0.5, 1.0]]);
        let out = normalize_depth(&Array2::from_elem((3, 3), 5.0f32)).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
        let fixed = array![[0.0f32, 0.25], [1.0, 0.5]];
        assert_eq!(normalize_depth(&fixed).unwrap(), fixed);
        assert!(matches!(
            normalize_depth(&array![[f32::NAN, 1.0]]),
            Err(Error::Input(_))
        ));
        assert!(normalize_depth(&array![[1.0, f32::INFINITY]]).is_err());
    }

    #[test]
    fn oracle_provider_and_resizing() {
        let mut height = Array2::<f32>::zeros((64, 64));
        height.slice_mut(ndarray::s![8..24, 16..40]).fill(7.0);
        let provider =
            InMemoryProvider::from_oracle([("t7".to_string(), height.clone())]).unwrap();
        let label = fetch_pseudo_label(&provider, "t7").unwrap();
        assert_eq!(label.maps[0], normalize_depth(&height).unwrap());
        assert_eq!(label.maps[1].dim(), (32, 32));
        assert_eq!(label.maps[2].dim(), (16, 16));

        let constant = Array2::from_elem((64, 64), 0.25f32);
        let half = area_downsample(&constant, 2).unwrap();
        assert_eq!(half.dim(), (32, 32));
        assert!(half.iter().all(|&v| v == 0.25));

        assert!(matches!(
            fetch_pseudo_label(&provider, "nope"),
            Err(Error::MissingLabel(id)) if id == "nope"
        ));
    }

    fn random_pyramid(h: usize, w: usize) -> FeaturePyramid {
        let cfg = BackboneConfig::tiny();
        FeaturePyramid {
            levels: (0..NUM_LEVELS)
                .map(|i| {
                    let s = 4 << i;
                    Tensor::randn(0f32, 1f32, (1, cfg.reassembly_channels[i], h / s, w / s), &Device::Cpu)
                        .unwrap()
                })
                .collect(),
            source: FeatureSource::Adapter,
        }
    }

    #[test]
    fn decoder_shapes_and_range() {
        let dec = DepthDecoder::new(&ParamStore::new(0, true), &BackboneConfig::tiny()).unwrap();
        for (h, w) in [(64, 64), (128, 128), (32, 96)] {
            let out = dec.decode_depth(&random_pyramid(h, w)).unwrap();
            let shapes: Vec<_> = out.maps.iter().map(|m| m.dims().to_vec()).collect();
            assert_eq!(
                shapes,
                vec![vec![1, 1, h, w], vec![1, 1, h / 2, w / 2], vec![1, 1, h / 4, w / 4]]
            );
            for m in &out.maps {
                let lo = m.min_all().unwrap().to_scalar::<f32>().unwrap();
                let hi = m.max_all().unwrap().to_scalar::<f32>().unwrap();
                assert!((0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi));
            }
        }
    }

    #[test]
    fn decoder_rejects_bad_pyramid() {
        let dec = DepthDecoder::new(&ParamStore::new(0, true), &BackboneConfig::tiny()).unwrap();
        let mut p = random_pyramid(64, 64);
        p.levels.truncate(3);
        assert!(matches!(dec.decode_depth(&p), Err(Error::Contract(_))));
    }
}
