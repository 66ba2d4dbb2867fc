//! Raster and table files: label maps (PGM or PNG), RGB images (PPM), heatmaps.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ColorType, GrayImage, ImageFormat, RgbImage};
use walkdir::WalkDir;

use crate::error::{CoreError, Result};
use crate::scenestats::LabelMap;

fn decode_err(path: &Path, e: image::ImageError) -> CoreError {
    CoreError::Data(format!("{}: {e}", path.display()))
}

/// Reads an 8-bit grayscale PGM or PNG whose pixel values are class ids.
pub fn read_label_map(path: &Path) -> Result<LabelMap> {
    let img = image::open(path).map_err(|e| decode_err(path, e))?;
    if img.color() != ColorType::L8 {
        return Err(CoreError::Data(format!(
            "{}: expected 8-bit grayscale ids, found {:?}",
            path.display(),
            img.color()
        )));
    }
    let gray = img.into_luma8();
    let (w, h) = gray.dimensions();
    Ok(LabelMap::new(w as usize, h as usize, gray.into_raw())?.with_name(path.display().to_string()))
}

pub fn write_gray(path: &Path, width: usize, height: usize, pixels: Vec<u8>) -> Result<()> {
    let img = GrayImage::from_raw(width as u32, height as u32, pixels)
        .ok_or_else(|| CoreError::Argument(format!("pixel buffer does not fit {width}x{height}")))?;
    let format = ImageFormat::from_path(path).unwrap_or(ImageFormat::Pnm);
    img.save_with_format(path, format).map_err(|e| decode_err(path, e))
}

pub fn write_label_map(path: &Path, map: &LabelMap) -> Result<()> {
    write_gray(path, map.width, map.height, map.ids.clone())
}

/// Interleaved 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rgb {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub fn read_rgb(path: &Path) -> Result<Rgb> {
    let img = image::open(path).map_err(|e| decode_err(path, e))?.into_rgb8();
    let (w, h) = img.dimensions();
    Ok(Rgb { width: w as usize, height: h as usize, pixels: img.into_raw() })
}

pub fn write_rgb(path: &Path, img: &Rgb) -> Result<()> {
    let buf = RgbImage::from_raw(img.width as u32, img.height as u32, img.pixels.clone())
        .ok_or_else(|| CoreError::Argument("RGB buffer size mismatch".into()))?;
    let format = ImageFormat::from_path(path).unwrap_or(ImageFormat::Pnm);
    buf.save_with_format(path, format).map_err(|e| decode_err(path, e))
}

/// Files under `dir` (recursively) whose names end with `suffix`, sorted by path.
pub fn list_files(dir: &Path, suffixes: &[&str]) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(CoreError::Data(format!("{} is not a directory", dir.display())));
    }
    let mut files = Vec::new();
    for entry in WalkDir::new(dir).follow_links(true) {
        let entry = entry.map_err(|e| CoreError::Data(format!("{}: {e}", dir.display())))?;
        let name = entry.file_name().to_string_lossy();
        if entry.file_type().is_file() && suffixes.iter().any(|s| name.ends_with(s)) {
            files.push(entry.into_path());
        }
    }
    files.sort();
    Ok(files)
}

/// Loads every label raster in `dir`. All unreadable files are reported together.
pub fn read_label_dir(dir: &Path, suffixes: &[&str]) -> Result<Vec<LabelMap>> {
    let files = list_files(dir, suffixes)?;
    if files.is_empty() {
        return Err(CoreError::Data(format!("no label files ({}) in {}", suffixes.join(", "), dir.display())));
    }
    let mut maps = Vec::with_capacity(files.len());
    let mut failed = Vec::new();
    for f in &files {
        match read_label_map(f) {
            Ok(m) => maps.push(m),
            Err(e) => failed.push(e.to_string()),
        }
    }
    if !failed.is_empty() {
        return Err(CoreError::Data(format!("unreadable label files:\n  {}", failed.join("\n  "))));
    }
    Ok(maps)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CoreError::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CoreError::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CoreError::io(path, e))
}

/// Six significant digits.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i32;
    if !(-5..=6).contains(&magnitude) {
        return format!("{x:.5e}");
    }
    let decimals = (5 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

/// `rows x cols` matrix as CSV with a header row.
pub fn matrix_csv(header: &[String], rows: &[Vec<f64>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.iter().map(|&v| sig6(v)).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    out
}

/// Grayscale heatmap of values in `[0, 1]` (clamped), `v -> round(255 v)`, with
/// each cell drawn as a `scale x scale` block.
pub fn heatmap_pixels(rows: &[Vec<f64>], scale: usize) -> (usize, usize, Vec<u8>) {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    let s = scale.max(1);
    let mut px = vec![0u8; h * w * s * s];
    for (y, r) in rows.iter().enumerate() {
        for (x, &v) in r.iter().enumerate() {
            let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            for dy in 0..s {
                let start = (y * s + dy) * w * s + x * s;
                px[start..start + s].fill(g);
            }
        }
    }
    (w * s, h * s, px)
}

pub fn write_heatmap(path: &Path, rows: &[Vec<f64>], scale: usize) -> Result<()> {
    let (w, h, px) = heatmap_pixels(rows, scale);
    write_gray(path, w, h, px)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn significant_digits() {
        assert_eq!(sig6(0.5), "0.500000");
        assert_eq!(sig6(0.0123456789), "0.0123457");
        assert_eq!(sig6(123.456789), "123.457");
        assert_eq!(sig6(0.0), "0");
    }

    #[test]
    fn label_map_round_trip_and_heatmap() {
        let dir = tempfile::tempdir().unwrap();
        let m = LabelMap::new(3, 2, vec![0, 1, 2, 255, 4, 5]).unwrap();
        for name in ["a.pgm", "b.png"] {
            let p = dir.path().join(name);
            write_label_map(&p, &m).unwrap();
            assert_eq!(read_label_map(&p).unwrap().ids, m.ids);
        }
        let (w, h, px) = heatmap_pixels(&[vec![0.5, 1.0], vec![0.0, 2.0]], 2);
        assert_eq!((w, h), (4, 4));
        assert_eq!(&px[..4], &[128, 128, 255, 255]);
        assert_eq!(&px[8..12], &[0, 0, 255, 255]);
    }

    #[test]
    fn empty_dir_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(read_label_dir(dir.path(), &[".pgm"]).is_err());
    }
}
