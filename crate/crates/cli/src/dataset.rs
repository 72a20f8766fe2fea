//! Image/mask pairs on disk: loading, splitting and a synthetic generator.
//!
//! A dataset directory holds `images/` and `masks/`; files pair up by stem
//! (`images/a.png` with `masks/a.png`). Masks are 8-bit grayscale and are
//! binarized at >127.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{DynamicImage, GrayImage, Luma, Rgb, RgbImage};
use rand::seq::SliceRandom;
use vig_unet::training::SegSample;
use vig_unet::{RngState, Tensor};

use crate::error::{CliError, Result};

pub const IMAGES: &str = "images";
pub const MASKS: &str = "masks";
/// Mask values above this count as foreground.
pub const MASK_THRESHOLD: u8 = 127;

fn stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(CliError::io(dir))? {
        let path = entry.map_err(CliError::io(dir))?.path();
        if !path.is_file() {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if stem.starts_with('.') {
            continue;
        }
        if let Some(prev) = out.insert(stem.to_string(), path.clone()) {
            return Err(CliError::Dataset(format!(
                "stem `{stem}` appears twice: {} and {}",
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(out)
}

/// `[C, H, W]` tensor in `[0, 1]`, resized bilinearly when the size differs.
/// `channels` must be 1 (grayscale) or 3 (RGB).
pub fn image_tensor(img: &DynamicImage, channels: usize, height: usize, width: usize) -> Result<Tensor> {
    let (w, h) = (width as u32, height as u32);
    let planes: Vec<Vec<u8>> = match channels {
        3 => {
            let mut rgb = img.to_rgb8();
            if rgb.dimensions() != (w, h) {
                rgb = imageops::resize(&rgb, w, h, FilterType::Triangle);
            }
            (0..3).map(|c| rgb.pixels().map(|p| p[c]).collect()).collect()
        }
        1 => {
            let mut g = img.to_luma8();
            if g.dimensions() != (w, h) {
                g = imageops::resize(&g, w, h, FilterType::Triangle);
            }
            vec![g.into_raw()]
        }
        c => return Err(CliError::Setting(format!("images must have 1 or 3 channels, config asks for {c}"))),
    };
    let data = planes.concat().into_iter().map(|v| v as f32 / 255.0).collect();
    Ok(Tensor::new(vec![channels, height, width], data)?)
}

/// `[1, H, W]` tensor of zeros and ones, resized by nearest neighbour.
pub fn mask_tensor(img: &DynamicImage, height: usize, width: usize) -> Result<Tensor> {
    let mut g = img.to_luma8();
    if g.dimensions() != (width as u32, height as u32) {
        g = imageops::resize(&g, width as u32, height as u32, FilterType::Nearest);
    }
    let data = g.pixels().map(|p| (p[0] > MASK_THRESHOLD) as u8 as f32).collect();
    Ok(Tensor::new(vec![1, height, width], data)?)
}

pub fn open_image(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(CliError::image(path))
}

/// Loads every pair under `root`, sorted by stem, at `height x width`.
pub fn load_dataset(root: &Path, channels: usize, height: usize, width: usize) -> Result<Vec<SegSample>> {
    let images = stems(&root.join(IMAGES))?;
    let masks = stems(&root.join(MASKS))?;
    if let Some(stem) = images.keys().find(|s| !masks.contains_key(*s)) {
        return Err(CliError::MissingMask { stem: stem.clone() });
    }
    if let Some(stem) = masks.keys().find(|s| !images.contains_key(*s)) {
        return Err(CliError::MissingImage { stem: stem.clone() });
    }
    images
        .iter()
        .map(|(stem, ipath)| {
            let image = image_tensor(&open_image(ipath)?, channels, height, width)?;
            let mask = mask_tensor(&open_image(&masks[stem])?, height, width)?;
            Ok(SegSample {
                name: stem.clone(),
                image,
                mask,
            })
        })
        .collect()
}

/// Number of validation samples: `round(n * ratio)`, kept within `1..n`.
pub fn validation_count(n: usize, ratio: f64) -> usize {
    ((n as f64 * ratio).round() as usize).clamp(1, n - 1)
}

/// Seeded shuffle, then the last `ratio` fraction goes to validation.
pub fn split_dataset(samples: Vec<SegSample>, ratio: f64, seed: u64) -> Result<(Vec<SegSample>, Vec<SegSample>)> {
    let n = samples.len();
    if n < 2 {
        return Err(CliError::Dataset(format!("need at least 2 samples to split, got {n}")));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CliError::Setting(format!("split ratio {ratio} must lie strictly between 0 and 1")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut RngState::new(seed));
    let n_train = n - validation_count(n, ratio);
    let mut slots: Vec<Option<SegSample>> = samples.into_iter().map(Some).collect();
    let mut take = |ids: &[usize]| ids.iter().map(|&i| slots[i].take().expect("index used once")).collect::<Vec<_>>();
    let train = take(&order[..n_train]);
    let val = take(&order[n_train..]);
    Ok((train, val))
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
}

impl Ellipse {
    fn random(rng: &mut RngState, size: f64) -> Self {
        let a = rng.uniform_range(size / 10.0, size / 4.0);
        let b = rng.uniform_range(size / 10.0, size / 4.0);
        // centre on a pixel centre so the ellipse always covers that pixel
        let margin = a.max(b) * 0.5;
        let cx = (rng.uniform_range(margin, size - margin)).floor() + 0.5;
        let cy = (rng.uniform_range(margin, size - margin)).floor() + 0.5;
        Self {
            cx,
            cy,
            a,
            b,
            angle: rng.uniform_range(0.0, std::f64::consts::PI),
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        u * u + v * v <= 1.0
    }
}

/// One synthetic RGB image and its exact foreground mask.
pub fn synthetic_pair(rng: &mut RngState, size: usize) -> (RgbImage, GrayImage) {
    let s = size as f64;
    let shapes: Vec<Ellipse> = (0..1 + rng.below(2)).map(|_| Ellipse::random(rng, s)).collect();
    let base: [f64; 3] = [rng.uniform_range(150.0, 230.0), rng.uniform_range(110.0, 190.0), rng.uniform_range(90.0, 170.0)];
    let lesion: [f64; 3] = [rng.uniform_range(40.0, 110.0), rng.uniform_range(20.0, 80.0), rng.uniform_range(20.0, 70.0)];
    let (fx, fy, phase) = (rng.uniform_range(1.0, 4.0), rng.uniform_range(1.0, 4.0), rng.uniform_range(0.0, 6.3));
    let mut img = RgbImage::new(size as u32, size as u32);
    let mut mask = GrayImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let inside = shapes.iter().any(|e| e.contains(px, py));
            let texture = 18.0 * ((fx * px / s + fy * py / s) * std::f64::consts::TAU + phase).sin();
            let colour = if inside { lesion } else { base };
            let mut rgb = [0u8; 3];
            for (c, v) in rgb.iter_mut().enumerate() {
                let noise = rng.uniform_range(-12.0, 12.0);
                *v = (colour[c] + texture + noise).clamp(0.0, 255.0) as u8;
            }
            img.put_pixel(x as u32, y as u32, Rgb(rgb));
            mask.put_pixel(x as u32, y as u32, Luma([if inside { 255 } else { 0 }]));
        }
    }
    (img, mask)
}

/// Writes `n` synthetic pairs under `root/images` and `root/masks`.
pub fn generate_synthetic(root: &Path, n: usize, size: usize, seed: u64) -> Result<()> {
    if size == 0 || size % vig_unet::model::SIZE_MULTIPLE != 0 {
        return Err(CliError::Setting(format!(
            "synthetic image size {size} must be a positive multiple of {}",
            vig_unet::model::SIZE_MULTIPLE
        )));
    }
    let (idir, mdir) = (root.join(IMAGES), root.join(MASKS));
    for d in [&idir, &mdir] {
        std::fs::create_dir_all(d).map_err(CliError::io(d))?;
    }
    let mut rng = RngState::new(seed);
    let width = n.saturating_sub(1).to_string().len().max(3);
    for i in 0..n {
        let (img, mask) = synthetic_pair(&mut rng, size);
        let name = format!("synth_{i:0width$}.png");
        let (ip, mp) = (idir.join(&name), mdir.join(&name));
        img.save(&ip).map_err(CliError::image(&ip))?;
        mask.save(&mp).map_err(CliError::image(&mp))?;
    }
    Ok(())
}
