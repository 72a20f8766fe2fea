//! Geometric augmentation and per-channel normalization of `[C, H, W]` images.

use crate::error::{Error, Result};
use crate::tensor::{RngState, Tensor};

/// Rotates every plane by `quarter_turns * 90` degrees clockwise.
pub fn rot90_cw(t: &Tensor, quarter_turns: usize) -> Result<Tensor> {
    let (c, h, w) = dims3(t)?;
    let k = quarter_turns % 4;
    if k == 0 {
        return Ok(t.clone());
    }
    if h != w {
        return Err(Error::arg(format!("rotation needs a square image, got {h}x{w}")));
    }
    let n = h;
    let src = t.data();
    let mut out = vec![0.0f32; src.len()];
    for ch in 0..c {
        let (s, d) = (&src[ch * n * n..(ch + 1) * n * n], &mut out[ch * n * n..(ch + 1) * n * n]);
        for y in 0..n {
            for x in 0..n {
                // output (y, x) reads the source pixel that lands there
                let (sy, sx) = match k {
                    1 => (n - 1 - x, y),
                    2 => (n - 1 - y, n - 1 - x),
                    _ => (x, n - 1 - y),
                };
                d[y * n + x] = s[sy * n + sx];
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

/// Mirrors left to right.
pub fn flip_horizontal(t: &Tensor) -> Result<Tensor> {
    let (_, _, w) = dims3(t)?;
    let mut out = t.clone();
    out.data_mut().chunks_mut(w).for_each(|row| row.reverse());
    Ok(out)
}

/// Mirrors top to bottom.
pub fn flip_vertical(t: &Tensor) -> Result<Tensor> {
    let (c, h, w) = dims3(t)?;
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    for ch in 0..c {
        for y in (0..h).rev() {
            let start = (ch * h + y) * w;
            out.extend_from_slice(&src[start..start + w]);
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

fn dims3(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::shape(format!("expected [C, H, W], got {s:?}"))),
    }
}

/// Which random transforms to apply during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentConfig {
    /// Random number (0 to 3) of clockwise quarter turns.
    pub rotate: bool,
    /// Independent random horizontal and vertical flips.
    pub flip: bool,
}

impl AugmentConfig {
    pub const NONE: Self = Self {
        rotate: false,
        flip: false,
    };
    pub const ALL: Self = Self { rotate: true, flip: true };
}

/// Per-channel `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Channel mean and population standard deviation over `images`.
    /// Constant channels get a standard deviation of 1.
    pub fn fit<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let mut sums: Vec<(f64, f64)> = Vec::new();
        let mut count = 0usize;
        for img in images {
            let (c, h, w) = dims3(img)?;
            if sums.is_empty() {
                sums = vec![(0.0, 0.0); c];
            } else if sums.len() != c {
                return Err(Error::shape(format!("images with {} and {c} channels", sums.len())));
            }
            for (ch, plane) in img.data().chunks(h * w).enumerate() {
                for &v in plane {
                    sums[ch].0 += v as f64;
                    sums[ch].1 += (v as f64) * (v as f64);
                }
            }
            count += h * w;
        }
        if count == 0 {
            return Err(Error::arg("cannot fit normalization on no images"));
        }
        let n = count as f64;
        let (mean, std) = sums
            .iter()
            .map(|&(s, sq)| {
                let m = s / n;
                let var = (sq / n - m * m).max(0.0);
                let sd = if var > 1e-12 { var.sqrt() } else { 1.0 };
                (m as f32, sd as f32)
            })
            .unzip();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, img: &Tensor) -> Result<Tensor> {
        let (c, h, w) = dims3(img)?;
        if c != self.mean.len() {
            return Err(Error::shape(format!("normalization for {} channels, image has {c}", self.mean.len())));
        }
        let mut out = img.clone();
        for (ch, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
            let (m, s) = (self.mean[ch], self.std[ch]);
            plane.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        Ok(out)
    }
}

/// Applies one random geometric transform to image and mask alike, then
/// normalizes the image. The mask is never rescaled.
pub fn augment_sample(
    img: &Tensor,
    mask: &Tensor,
    cfg: AugmentConfig,
    norm: &Normalization,
    rng: &mut RngState,
) -> Result<(Tensor, Tensor)> {
    let (_, h, w) = dims3(img)?;
    let (_, mh, mw) = dims3(mask)?;
    if (h, w) != (mh, mw) {
        return Err(Error::shape(format!("image {h}x{w} with mask {mh}x{mw}")));
    }
    let (mut img, mut mask) = (img.clone(), mask.clone());
    if cfg.rotate {
        if h != w {
            return Err(Error::arg(format!("rotation needs a square image, got {h}x{w}")));
        }
        let k = rng.below(4);
        img = rot90_cw(&img, k)?;
        mask = rot90_cw(&mask, k)?;
    }
    if cfg.flip {
        if rng.bernoulli(0.5) {
            img = flip_horizontal(&img)?;
            mask = flip_horizontal(&mask)?;
        }
        if rng.bernoulli(0.5) {
            img = flip_vertical(&img)?;
            mask = flip_vertical(&mask)?;
        }
    }
    Ok((norm.apply(&img)?, mask))
}
