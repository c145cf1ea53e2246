//! PNG codecs: 8-bit RGB tiles, 8-bit index masks, 16-bit depth rasters,
//! plus the tab-separated split manifest.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, RgbImage};
use ndarray::{Array2, Array3};

use super::{LabelMask, Split};
use crate::error::{Error, Result};

fn open(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn save(img: &DynamicImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| match source {
            image::ImageError::IoError(e) => Error::io(path, e),
            source => Error::Image {
                path: path.to_path_buf(),
                source,
            },
        })
}

/// H×W×3 values scaled to [0, 1].
pub fn read_rgb_png(path: &Path) -> Result<Array3<f32>> {
    let img = open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Ok(Array3::from_shape_vec((h as usize, w as usize, 3), data).expect("raw rgb length"))
}

pub fn write_rgb_png(path: &Path, pixels: &Array3<f32>) -> Result<()> {
    let (h, w, c) = pixels.dim();
    if c != 3 {
        return Err(Error::Input(format!("expected 3 bands, got {c}")));
    }
    let raw = pixels
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = RgbImage::from_raw(w as u32, h as u32, raw).expect("raw rgb length");
    save(&DynamicImage::ImageRgb8(img), path)
}

pub fn write_color_png(path: &Path, rgb: &Array3<u8>) -> Result<()> {
    let (h, w, _) = rgb.dim();
    let img = RgbImage::from_raw(w as u32, h as u32, rgb.iter().copied().collect())
        .ok_or_else(|| Error::Input("colour raster must have 3 bands".into()))?;
    save(&DynamicImage::ImageRgb8(img), path)
}

pub fn read_color_png(path: &Path) -> Result<Array3<u8>> {
    let img = open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_vec((h as usize, w as usize, 3), img.into_raw()).expect("raw rgb length"))
}

/// Single-channel 8-bit class indices.
pub fn read_mask_png(path: &Path) -> Result<LabelMask> {
    let img = match open(path)? {
        DynamicImage::ImageLuma8(img) => img,
        other => {
            return Err(Error::Input(format!(
                "mask {} must be single-channel 8-bit, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = img.dimensions();
    let classes = Array2::from_shape_vec((h as usize, w as usize), img.into_raw()).expect("raw mask length");
    LabelMask::new(classes).map_err(|e| match e {
        Error::IllegalClass { value, .. } => Error::IllegalClass {
            value,
            context: path.display().to_string(),
        },
        e => e,
    })
}

pub fn write_mask_png(path: &Path, mask: &LabelMask) -> Result<()> {
    let (h, w) = mask.dim();
    let img = GrayImage::from_raw(w as u32, h as u32, mask.classes().iter().copied().collect())
        .expect("raw mask length");
    save(&DynamicImage::ImageLuma8(img), path)
}

/// 16-bit depth: 0 → 0.0, 65535 → 1.0. 8-bit files are accepted and
/// scaled by 255.
pub fn read_depth_png(path: &Path) -> Result<Array2<f32>> {
    let (w, h, data): (u32, u32, Vec<f32>) = match open(path)? {
        DynamicImage::ImageLuma16(img) => {
            let (w, h) = img.dimensions();
            (w, h, img.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect())
        }
        DynamicImage::ImageLuma8(img) => {
            let (w, h) = img.dimensions();
            (w, h, img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect())
        }
        other => {
            return Err(Error::Input(format!(
                "depth {} must be single-channel, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    Ok(Array2::from_shape_vec((h as usize, w as usize), data).expect("raw depth length"))
}

/// Values are clamped to [0, 1] before quantisation.
pub fn write_depth_png(path: &Path, depth: &Array2<f32>) -> Result<()> {
    let (h, w) = depth.dim();
    let raw: Vec<u16> = depth
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, raw).expect("raw depth length");
    save(&DynamicImage::ImageLuma16(img), path)
}

pub fn read_split_manifest(path: &Path) -> Result<Vec<(String, Split)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let (id, split) = line.split_once('\t').ok_or_else(|| {
                Error::Input(format!("{}:{}: expected `tile_id<TAB>split`", path.display(), i + 1))
            })?;
            Ok((id.to_string(), Split::parse(split.trim())?))
        })
        .collect()
}

pub fn write_split_manifest(path: &Path, entries: &[(String, Split)]) -> Result<()> {
    let text: String = entries
        .iter()
        .map(|(id, s)| format!("{id}\t{}\n", s.as_str()))
        .collect();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_round_trip_is_exact_on_the_lattice() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t_depth.png");
        let d = Array2::from_shape_fn((4, 8), |(y, x)| ((y * 8 + x) as f32 * 2047.0) / 65535.0);
        write_depth_png(&path, &d).unwrap();
        let back = read_depth_png(&path).unwrap();
        for (a, b) in d.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-7);
        }
        assert_eq!(back[[0, 0]], 0.0);
    }

    #[test]
    fn mask_and_rgb_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mask = LabelMask::new(Array2::from_shape_fn((4, 4), |(y, x)| ((y + x) % 7) as u8)).unwrap();
        write_mask_png(&dir.path().join("m.png"), &mask).unwrap();
        assert_eq!(read_mask_png(&dir.path().join("m.png")).unwrap(), mask);

        let rgb = Array3::from_shape_fn((4, 4, 3), |(y, x, c)| ((y * 16 + x * 4 + c) as f32) / 255.0);
        write_rgb_png(&dir.path().join("i.png"), &rgb).unwrap();
        let back = read_rgb_png(&dir.path().join("i.png")).unwrap();
        for (a, b) in rgb.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn rgb_mask_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        write_rgb_png(&path, &Array3::zeros((4, 4, 3))).unwrap();
        assert!(matches!(read_mask_png(&path), Err(Error::Input(_))));
        assert!(matches!(
            read_mask_png(&dir.path().join("absent.png")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("splits.tsv");
        let entries = vec![
            ("a".to_string(), Split::Train),
            ("b".to_string(), Split::Val),
            ("c".to_string(), Split::Test),
        ];
        write_split_manifest(&path, &entries).unwrap();
        assert_eq!(read_split_manifest(&path).unwrap(), entries);
        std::fs::write(&path, "a train\n").unwrap();
        assert!(read_split_manifest(&path).is_err());
    }
}
