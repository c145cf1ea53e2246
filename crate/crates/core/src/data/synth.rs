//! Procedural scenes with known labels and heights.
//!
//! Objects sit on a lattice of [`CELL`]-pixel cells. Roofs and plazas are
//! drawn from one texture distribution, so colour alone cannot separate
//! buildings from impervious surface. Buildings cast shadows away from
//! the sun that darken the ground without changing its label.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{LabelMask, BARE_LAND, BUILDINGS, FARMLAND, FOREST, IMPERVIOUS, ROAD, WATER};
use crate::backbone::{check_tile_dims, ImageTile};
use crate::error::{Error, Result};

/// Lattice pitch in pixels.
pub const CELL: usize = 8;

const PARCEL: usize = 2;
const SHADOW_FACTOR: f32 = 0.4;
const HEIGHT_RANGE: (f32, f32) = (3.0, 12.0);

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub size: usize,
    pub building_density: f64,
    /// Direction towards the sun, degrees clockwise from image up.
    pub sun_azimuth_deg: f64,
    pub sun_elevation_deg: f64,
    /// Road width in lattice cells; 0 disables roads.
    pub road_width: usize,
    pub water_blobs: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 64,
            building_density: 0.3,
            sun_azimuth_deg: 135.0,
            sun_elevation_deg: 50.0,
            road_width: 1,
            water_blobs: 1,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        check_tile_dims(self.size, self.size)?;
        if !(0.0..=1.0).contains(&self.building_density) {
            return Err(Error::Input(format!(
                "building density {} outside [0, 1]",
                self.building_density
            )));
        }
        if !self.sun_azimuth_deg.is_finite()
            || !(self.sun_elevation_deg > 0.0 && self.sun_elevation_deg <= 90.0)
        {
            return Err(Error::Input(format!(
                "sun position ({}, {}) invalid",
                self.sun_azimuth_deg, self.sun_elevation_deg
            )));
        }
        if self.road_width * 2 > self.size / CELL {
            return Err(Error::Input(format!(
                "road width {} cells too wide for a {} px scene",
                self.road_width, self.size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub tile: ImageTile,
    pub mask: LabelMask,
    /// Metres (one metre per pixel); zero off buildings.
    pub height: Array2<f32>,
    pub shadow: Array2<bool>,
}

struct Layout {
    class: Array2<u8>,
    /// Texture tint per cell for roofs and plazas.
    tint: Array2<f32>,
    height: Array2<f32>,
    stripes_vertical: Array2<bool>,
}

fn place_rects(
    rng: &mut ChaCha8Rng,
    layout: &mut Layout,
    count: usize,
    class: u8,
    heights: Option<(f32, f32)>,
) {
    let n = layout.class.nrows();
    let free = |c: u8| matches!(c, FARMLAND | FOREST | BARE_LAND);
    let mut placed = 0;
    let mut tries = 0;
    while placed < count && tries < count * 30 {
        tries += 1;
        let h = rng.random_range(1..=2usize);
        let w = rng.random_range(1..=2usize);
        let y0 = rng.random_range(0..=n - h);
        let x0 = rng.random_range(0..=n - w);
        let tint = rng.random_range(-0.08f32..0.08);
        let z = heights.map(|(lo, hi)| rng.random_range(lo..hi));
        let cells = || (y0..y0 + h).flat_map(move |y| (x0..x0 + w).map(move |x| (y, x)));
        if !cells().all(|p| free(layout.class[p])) {
            continue;
        }
        for p in cells() {
            layout.class[p] = class;
            layout.tint[p] = tint;
            if let Some(z) = z {
                layout.height[p] = z;
            }
        }
        placed += 1;
    }
}

fn layout(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Layout {
    let n = spec.size / CELL;
    let parcels = n.div_ceil(PARCEL);
    let ground: Vec<(u8, bool)> = (0..parcels * parcels)
        .map(|_| {
            let r: f64 = rng.random();
            let class = if r < 0.45 {
                FARMLAND
            } else if r < 0.7 {
                FOREST
            } else {
                BARE_LAND
            };
            (class, rng.random())
        })
        .collect();
    let parcel = |y: usize, x: usize| ground[(y / PARCEL) * parcels + x / PARCEL];
    let mut out = Layout {
        class: Array2::from_shape_fn((n, n), |(y, x)| parcel(y, x).0),
        tint: Array2::zeros((n, n)),
        height: Array2::zeros((n, n)),
        stripes_vertical: Array2::from_shape_fn((n, n), |(y, x)| parcel(y, x).1),
    };

    for _ in 0..spec.water_blobs {
        let cy = rng.random_range(0.0..n as f64);
        let cx = rng.random_range(0.0..n as f64);
        let r = rng.random_range(1.0..2.5);
        for ((y, x), c) in out.class.indexed_iter_mut() {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            if dy * dy + dx * dx <= r * r {
                *c = WATER;
            }
        }
    }

    if spec.road_width > 0 {
        let w = spec.road_width;
        let row = rng.random_range(0..=n - w);
        let col = rng.random_range(0..=n - w);
        for ((y, x), c) in out.class.indexed_iter_mut() {
            if (row..row + w).contains(&y) || (col..col + w).contains(&x) {
                *c = ROAD;
            }
        }
    }

    let plazas = (n * n / 32).max(1);
    place_rects(rng, &mut out, plazas, IMPERVIOUS, None);
    let buildings = (spec.building_density * (n * n) as f64 / 6.0).round() as usize;
    place_rects(rng, &mut out, buildings, BUILDINGS, Some(HEIGHT_RANGE));
    out
}

/// Marks non-building pixels whose ray towards the sun passes under a roof.
fn cast_shadows(height: &Array2<f32>, azimuth_deg: f64, elevation_deg: f64) -> Array2<bool> {
    let (h, w) = height.dim();
    let max_h = height.iter().copied().fold(0f32, f32::max) as f64;
    let mut shadow = Array2::from_elem((h, w), false);
    if max_h <= 0.0 {
        return shadow;
    }
    let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    let (dx, dy) = (az.sin(), -az.cos());
    let rise = el.tan();
    let reach = max_h / rise.max(1e-6);
    for ((y, x), s) in shadow.indexed_iter_mut() {
        if height[[y, x]] > 0.0 {
            continue;
        }
        let mut t = 0.5;
        while t <= reach {
            let (sx, sy) = (x as f64 + 0.5 + t * dx, y as f64 + 0.5 + t * dy);
            if sx < 0.0 || sy < 0.0 || sx >= w as f64 || sy >= h as f64 {
                break;
            }
            if height[[sy as usize, sx as usize]] as f64 > t * rise {
                *s = true;
                break;
            }
            t += 0.5;
        }
    }
    shadow
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cells = layout(spec, &mut rng);
    let s = spec.size;
    let cell = |y: usize, x: usize| (y / CELL, x / CELL);

    let classes = Array2::from_shape_fn((s, s), |(y, x)| cells.class[cell(y, x)]);
    let height = Array2::from_shape_fn((s, s), |(y, x)| cells.height[cell(y, x)]);
    let shadow = cast_shadows(&height, spec.sun_azimuth_deg, spec.sun_elevation_deg);

    let noise = Normal::new(0f32, 1.0).expect("unit normal");
    let mut pixels = Array3::<f32>::zeros((s, s, 3));
    for y in 0..s {
        for x in 0..s {
            let c = cell(y, x);
            let e = noise.sample(&mut rng);
            let (base, amp): ([f32; 3], f32) = match cells.class[c] {
                WATER => ([0.10, 0.20, 0.35], 0.015),
                ROAD => ([0.40, 0.40, 0.42], 0.02),
                FARMLAND => {
                    let u = if cells.stripes_vertical[c] { x } else { y };
                    let stripe = 0.06 * (std::f32::consts::TAU * u as f32 / 4.0).sin();
                    ([0.55 + stripe, 0.62 + stripe, 0.30], 0.02)
                }
                FOREST => ([0.16, 0.34, 0.15], 0.05),
                BARE_LAND => ([0.58, 0.48, 0.36], 0.03),
                _ => {
                    let t = cells.tint[c];
                    ([0.68 + t, 0.66 + t, 0.62 + t], 0.03)
                }
            };
            let dim = if shadow[[y, x]] { SHADOW_FACTOR } else { 1.0 };
            for (k, b) in base.iter().enumerate() {
                pixels[[y, x, k]] = ((b + amp * e) * dim).clamp(0.0, 1.0);
            }
        }
    }

    Ok(Scene {
        tile: ImageTile::new(pixels, format!("scene-{}", spec.seed))?,
        mask: LabelMask::new(classes)?,
        height,
        shadow,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(seed: u64, density: f64) -> SceneSpec {
        SceneSpec {
            seed,
            building_density: density,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate_scene(&spec(3, 0.5)).unwrap();
        let b = generate_scene(&spec(3, 0.5)).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&spec(4, 0.5)).unwrap();
        assert_ne!(a.tile, c.tile);
    }

    #[test]
    fn zero_density_has_no_buildings_or_shadows() {
        for seed in 0..5 {
            let s = generate_scene(&spec(seed, 0.0)).unwrap();
            assert!(s.mask.classes().iter().all(|&c| c != BUILDINGS));
            assert!(s.shadow.iter().all(|&v| !v));
            assert!(s.height.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn roofs_and_plazas_share_a_texture_distribution() {
        let mut roof = [0f64; 3];
        let mut plaza = [0f64; 3];
        let (mut nr, mut np) = (0usize, 0usize);
        for seed in 0..40 {
            let s = generate_scene(&spec(seed, 0.6)).unwrap();
            for ((y, x), &c) in s.mask.classes().indexed_iter() {
                if s.shadow[[y, x]] {
                    continue;
                }
                let acc = match c {
                    BUILDINGS => {
                        nr += 1;
                        &mut roof
                    }
                    IMPERVIOUS => {
                        np += 1;
                        &mut plaza
                    }
                    _ => continue,
                };
                for k in 0..3 {
                    acc[k] += s.tile.pixels()[[y, x, k]] as f64;
                }
            }
        }
        assert!(nr > 0 && np > 0);
        for k in 0..3 {
            assert!((roof[k] / nr as f64 - plaza[k] / np as f64).abs() < 0.03);
        }
    }

    #[test]
    fn shadows_fall_away_from_the_sun() {
        let mut height = Array2::zeros((32, 32));
        height[[16, 16]] = 4.0;
        // sun in the east: shadow extends west
        let s = cast_shadows(&height, 90.0, 45.0);
        assert!(s[[16, 13]]);
        assert!(!s[[16, 19]]);
        assert!(!s[[16, 16]]);
        // lower sun, longer shadow
        let long = cast_shadows(&height, 90.0, 20.0);
        assert!(long.iter().filter(|&&v| v).count() > s.iter().filter(|&&v| v).count());
    }

    #[test]
    fn invalid_specs() {
        for bad in [
            SceneSpec { size: 50, ..SceneSpec::default() },
            SceneSpec { building_density: 1.5, ..SceneSpec::default() },
            SceneSpec { sun_elevation_deg: 0.0, ..SceneSpec::default() },
            SceneSpec { road_width: 5, ..SceneSpec::default() },
        ] {
            assert!(matches!(generate_scene(&bad), Err(Error::Input(_))));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn labels_heights_and_shadows_agree(seed in any::<u64>(), density in 0.0f64..1.0,
                                            az in 0.0f64..360.0, el in 15.0f64..80.0) {
            let s = generate_scene(&SceneSpec {
                seed, building_density: density, sun_azimuth_deg: az, sun_elevation_deg: el,
                ..SceneSpec::default()
            }).unwrap();
            for ((y, x), &c) in s.mask.classes().indexed_iter() {
                let h = s.height[[y, x]];
                prop_assert_eq!(h > 0.0, c == BUILDINGS);
                if c == BUILDINGS {
                    prop_assert!(!s.shadow[[y, x]]);
                }
                if c == WATER {
                    prop_assert_eq!(h, 0.0);
                }
            }
            // labels are constant on each lattice cell
            for ((y, x), &c) in s.mask.classes().indexed_iter() {
                prop_assert_eq!(c, s.mask.classes()[[y / CELL * CELL, x / CELL * CELL]]);
            }
        }
    }
}
