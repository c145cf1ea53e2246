//! Land-cover labels, sample ingestion, spatial splits and the synthetic
//! scene generator.

pub mod io;
mod split;
mod synth;

use std::path::Path;

use ndarray::{Array2, Array3};

use crate::backbone::ImageTile;
use crate::depth::normalize_depth;
use crate::error::{Error, Result};

pub use split::{split_counts, split_spatial, Split, SplitAssignment, TileGrid};
pub use synth::{generate_scene, Scene, SceneSpec, CELL};

pub const NUM_CLASSES: usize = 7;
pub const IGNORE_INDEX: u8 = 255;

/// Per-pixel class indices in `0..NUM_CLASSES` or [`IGNORE_INDEX`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    classes: Array2<u8>,
}

impl LabelMask {
    pub fn new(classes: Array2<u8>) -> Result<Self> {
        if let Some(&v) = classes
            .iter()
            .find(|&&v| v as usize >= NUM_CLASSES && v != IGNORE_INDEX)
        {
            return Err(Error::IllegalClass {
                value: v,
                context: "label mask".into(),
            });
        }
        Ok(Self { classes })
    }

    pub fn classes(&self) -> &Array2<u8> {
        &self.classes
    }

    pub fn dim(&self) -> (usize, usize) {
        self.classes.dim()
    }

    pub fn into_inner(self) -> Array2<u8> {
        self.classes
    }
}

/// Class names and render colours in legend order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassSchema {
    pub names: [&'static str; NUM_CLASSES],
    pub colors: [[u8; 3]; NUM_CLASSES],
    pub ignore_color: [u8; 3],
}

pub const WATER: u8 = 0;
pub const ROAD: u8 = 1;
pub const BUILDINGS: u8 = 2;
pub const FARMLAND: u8 = 3;
pub const FOREST: u8 = 4;
pub const BARE_LAND: u8 = 5;
pub const IMPERVIOUS: u8 = 6;

impl Default for ClassSchema {
    fn default() -> Self {
        Self {
            names: [
                "water",
                "road",
                "buildings",
                "farmland",
                "forest",
                "bare land",
                "impervious surface",
            ],
            colors: [
                [0, 112, 255],
                [255, 255, 0],
                [230, 0, 0],
                [150, 220, 80],
                [0, 110, 40],
                [190, 140, 90],
                [200, 200, 200],
            ],
            ignore_color: [0, 0, 0],
        }
    }
}

impl ClassSchema {
    pub fn color(&self, class: u8) -> [u8; 3] {
        match self.colors.get(class as usize) {
            Some(c) => *c,
            None => self.ignore_color,
        }
    }

    /// H×W×3 colour raster of a mask.
    pub fn render(&self, mask: &LabelMask) -> Array3<u8> {
        let (h, w) = mask.dim();
        Array3::from_shape_fn((h, w, 3), |(y, x, c)| self.color(mask.classes[[y, x]])[c])
    }

    pub fn decode(&self, rgb: &Array3<u8>) -> Result<LabelMask> {
        let (h, w, c) = rgb.dim();
        if c != 3 {
            return Err(Error::Input(format!("colour mask must have 3 bands, got {c}")));
        }
        let mut classes = Array2::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                let px = [rgb[[y, x, 0]], rgb[[y, x, 1]], rgb[[y, x, 2]]];
                classes[[y, x]] = if px == self.ignore_color {
                    IGNORE_INDEX
                } else {
                    self.colors
                        .iter()
                        .position(|c| *c == px)
                        .ok_or_else(|| Error::Input(format!("colour {px:?} not in palette")))?
                        as u8
                };
            }
        }
        LabelMask::new(classes)
    }
}

/// One image tile with its labels and, when available, its normalised
/// depth pseudo-label.
#[derive(Debug, Clone)]
pub struct Sample {
    pub tile: ImageTile,
    pub mask: LabelMask,
    pub depth: Option<Array2<f32>>,
}

impl Sample {
    pub fn tile_id(&self) -> &str {
        self.tile.tile_id()
    }
}

pub fn load_sample(
    image: &Path,
    mask: &Path,
    depth: Option<&Path>,
    require_depth: bool,
) -> Result<Sample> {
    let tile_id = image
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Input(format!("bad image file name {}", image.display())))?;
    let tile = ImageTile::new(io::read_rgb_png(image)?, tile_id)?;
    let mask = io::read_mask_png(mask)?;
    let dims = (tile.height(), tile.width());
    if mask.dim() != dims {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} does not match tile {:?}",
            mask.dim(),
            dims
        )));
    }
    let depth = match depth.filter(|p| p.exists()) {
        Some(p) => {
            let d = io::read_depth_png(p)?;
            if d.dim() != dims {
                return Err(Error::ShapeMismatch(format!(
                    "depth {:?} does not match tile {:?}",
                    d.dim(),
                    dims
                )));
            }
            Some(normalize_depth(&d)?)
        }
        None if require_depth => return Err(Error::MissingLabel(tile_id.to_string())),
        None => None,
    };
    Ok(Sample { tile, mask, depth })
}

/// Dataset directory: `images/`, `masks/`, `depth/` and a `splits.tsv`
/// manifest.
#[derive(Debug, Clone)]
pub struct DatasetDir {
    root: std::path::PathBuf,
    entries: Vec<(String, Split)>,
}

pub const MANIFEST_FILE: &str = "splits.tsv";

impl DatasetDir {
    pub fn open(root: &Path) -> Result<Self> {
        let entries = io::read_split_manifest(&root.join(MANIFEST_FILE))?;
        Ok(Self {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self) -> &[(String, Split)] {
        &self.entries
    }

    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, s)| *s == split)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn image_path(&self, id: &str) -> std::path::PathBuf {
        self.root.join("images").join(format!("{id}.png"))
    }

    pub fn mask_path(&self, id: &str) -> std::path::PathBuf {
        self.root.join("masks").join(format!("{id}.png"))
    }

    pub fn depth_dir(&self) -> std::path::PathBuf {
        self.root.join("depth")
    }

    pub fn depth_path(&self, id: &str) -> std::path::PathBuf {
        self.depth_dir().join(format!("{id}_depth.png"))
    }

    pub fn load(&self, split: Split, require_depth: bool) -> Result<Vec<Sample>> {
        self.ids(split)
            .into_iter()
            .map(|id| {
                let depth = self.depth_path(id);
                load_sample(
                    &self.image_path(id),
                    &self.mask_path(id),
                    Some(&depth),
                    require_depth,
                )
            })
            .collect()
    }
}
