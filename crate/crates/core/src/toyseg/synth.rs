//! Paired image/label sets on disk and a generator of vertically banded scenes.
//!
//! Class `c` of `K` occupies the `c`-th of `K` equal horizontal bands. Two textures
//! alternate from band to band, so every class looks identical to the classes two,
//! four, ... bands away and only its height tells them apart.

use std::f64::consts::PI;
use std::path::Path;

use hanet_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::io::{self, Rgb};
use crate::scenestats::LabelMap;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub image: Rgb,
    pub labels: LabelMap,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<LabelMap> {
        self.samples.iter().map(|s| s.labels.clone()).collect()
    }

    /// Writes `images/NNNN.ppm` and `labels/NNNN.pgm` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let (img_dir, lab_dir) = (dir.join("images"), dir.join("labels"));
        io::create_dir(&img_dir)?;
        io::create_dir(&lab_dir)?;
        for (i, s) in self.samples.iter().enumerate() {
            io::write_rgb(&img_dir.join(format!("{i:04}.ppm")), &s.image)?;
            io::write_label_map(&lab_dir.join(format!("{i:04}.pgm")), &s.labels)?;
        }
        Ok(())
    }

    /// Reads a directory written by [`Dataset::save`]; labels are matched to images by file stem.
    pub fn load(dir: &Path) -> Result<Self> {
        let images = io::list_files(&dir.join("images"), &[".ppm", ".png"])?;
        if images.is_empty() {
            return Err(CoreError::Data(format!("no images in {}", dir.join("images").display())));
        }
        let mut samples = Vec::with_capacity(images.len());
        for path in images {
            let stem = path.file_stem().unwrap_or_default().to_string_lossy().to_string();
            let label_path = [".pgm", ".png"]
                .iter()
                .map(|ext| dir.join("labels").join(format!("{stem}{ext}")))
                .find(|p| p.is_file())
                .ok_or_else(|| CoreError::Data(format!("no label raster for {}", path.display())))?;
            let image = io::read_rgb(&path)?;
            let labels = io::read_label_map(&label_path)?;
            if (image.width, image.height) != (labels.width, labels.height) {
                return Err(CoreError::Data(format!(
                    "{} is {}x{} but its labels are {}x{}",
                    path.display(),
                    image.width,
                    image.height,
                    labels.width,
                    labels.height
                )));
            }
            samples.push(Sample { image, labels });
        }
        Ok(Dataset { samples })
    }
}

/// Maps 8-bit RGB to `[1, 3, H, W]` with `(v / 255 - 0.5) / 0.25`.
pub fn normalize_into(img: &Rgb, out: &mut Vec<f64>) {
    let plane = img.width * img.height;
    for c in 0..3 {
        out.extend((0..plane).map(|i| (img.pixels[3 * i + c] as f64 / 255.0 - 0.5) / 0.25));
    }
}

/// Stacks equally sized images into `[n, 3, H, W]`.
pub fn image_batch(images: &[&Rgb]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| CoreError::Argument("empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.width, img.height) != (w, h) {
            return Err(CoreError::Data("images in a batch must share a size".into()));
        }
        normalize_into(img, &mut data);
    }
    Ok(Tensor::new(vec![images.len(), 3, h, w], data)?)
}

/// Texture index of `class`; classes of equal parity share one.
pub fn texture_of(class: usize) -> usize {
    class % TEXTURES
}

/// Generating band `[start, end)` of each class in rows of an image of `height`.
pub fn generating_bands(height: usize, num_classes: usize) -> Vec<(usize, usize)> {
    let class_of = |r: usize| ((r as f64 + 0.5) * num_classes as f64 / height as f64) as usize;
    (0..num_classes)
        .map(|c| {
            let start = (0..height).find(|&r| class_of(r) >= c).unwrap_or(height);
            let end = (0..height).find(|&r| class_of(r) > c).unwrap_or(height);
            (start, end)
        })
        .collect()
}

const TEXTURES: usize = 2;
const PALETTE: [[f64; 3]; TEXTURES] = [[150.0, 110.0, 90.0], [90.0, 140.0, 110.0]];

const SHIFT: f64 = 0.3;
const WAVE: f64 = 0.15;

struct Texture {
    base: [f64; 3],
    dir: (f64, f64),
    period: f64,
}

fn texture(t: usize) -> Texture {
    let angle = PI * t as f64 / TEXTURES as f64;
    Texture { base: PALETTE[t], dir: (angle.cos(), angle.sin()), period: 4.0 + 1.5 * t as f64 }
}

/// `n_images` banded scenes of `height x width`. `noise` in `[0, 1]` scales how far
/// band boundaries shift and undulate; `0` gives exact bands.
pub fn synth_banded(
    seed: u64,
    n_images: usize,
    height: usize,
    width: usize,
    num_classes: usize,
    noise: f64,
) -> Result<Dataset> {
    if num_classes < 3 || num_classes > 255 {
        return Err(CoreError::Argument(format!("num_classes {num_classes} outside 3..=255")));
    }
    if !(0.0..=1.0).contains(&noise) {
        return Err(CoreError::Argument(format!("noise {noise} outside [0, 1]")));
    }
    if height < num_classes || width == 0 {
        return Err(CoreError::Argument(format!("{height}x{width} image cannot hold {num_classes} bands")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let textures: Vec<Texture> = (0..TEXTURES).map(texture).collect();
    let band = height as f64 / num_classes as f64;
    let samples = (0..n_images)
        .map(|_| {
            // boundary c separates class c from c + 1
            let boundaries: Vec<(f64, f64, f64, f64)> = (0..num_classes - 1)
                .map(|c| {
                    let nominal = (c + 1) as f64 * band;
                    let scale = noise * band;
                    let shift = scale * SHIFT * rng.random_range(-1.0..=1.0);
                    let freq = 2.0 * PI / (width as f64 * rng.random_range(0.5..2.0));
                    (nominal + shift, scale * WAVE, freq, rng.random_range(0.0..2.0 * PI))
                })
                .collect();
            let phases: Vec<f64> = (0..TEXTURES).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
            let mut ids = vec![0u8; height * width];
            let mut pixels = vec![0u8; 3 * height * width];
            for y in 0..height {
                let yc = y as f64 + 0.5;
                for x in 0..width {
                    let class = boundaries
                        .iter()
                        .filter(|&&(b, amp, freq, ph)| b + amp * (freq * x as f64 + ph).sin() <= yc)
                        .count();
                    let t = texture_of(class);
                    let tex = &textures[t];
                    let wave =
                        (2.0 * PI * (x as f64 * tex.dir.0 + y as f64 * tex.dir.1) / tex.period + phases[t]).sin();
                    let i = y * width + x;
                    ids[i] = class as u8;
                    for ch in 0..3 {
                        let v = tex.base[ch] + 45.0 * wave + rng.random_range(-25.0..25.0);
                        pixels[3 * i + ch] = v.round().clamp(0.0, 255.0) as u8;
                    }
                }
            }
            Sample {
                image: Rgb { width, height, pixels },
                labels: LabelMap { width, height, ids, name: String::from("<synthetic>") },
            }
        })
        .collect();
    Ok(Dataset { samples })
}
