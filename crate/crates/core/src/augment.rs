//! The three augmentation families: weak geometric transforms shared by
//! image and mask, strong photometric image perturbations plus CutMix, and
//! strong feature-level dropout.

use ndarray::prelude::*;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels;
use crate::types::{FeatureMap, Image, Mask, IGNORE};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AugConfig {
    pub crop_size: usize,
    pub scale_range: (f64, f64),
    pub hflip_prob: f64,
    /// Half-width of the brightness/contrast/saturation factor ranges:
    /// each factor is drawn from [1 - strength, 1 + strength].
    pub jitter_strength: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma_range: (f64, f64),
    pub cutmix_prob: f64,
    pub feature_dropout_rate: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            crop_size: 64,
            scale_range: (0.5, 2.0),
            hflip_prob: 0.5,
            jitter_strength: 0.4,
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            blur_sigma_range: (0.1, 2.0),
            cutmix_prob: 0.5,
            feature_dropout_rate: 0.5,
        }
    }
}

impl AugConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 {
            return Err(Error::validation("crop_size must be positive"));
        }
        if !(self.scale_range.0 > 0.0 && self.scale_range.0 <= self.scale_range.1) {
            return Err(Error::validation(
                "scale_range must satisfy 0 < min <= max",
            ));
        }
        for (name, p) in [
            ("hflip_prob", self.hflip_prob),
            ("grayscale_prob", self.grayscale_prob),
            ("blur_prob", self.blur_prob),
            ("cutmix_prob", self.cutmix_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::validation(format!("{name} must be in [0, 1]")));
            }
        }
        if !(self.jitter_strength >= 0.0 && self.jitter_strength.is_finite()) {
            return Err(Error::validation("jitter_strength must be finite and >= 0"));
        }
        if !(self.blur_sigma_range.0 > 0.0 && self.blur_sigma_range.0 <= self.blur_sigma_range.1)
        {
            return Err(Error::validation(
                "blur_sigma_range must satisfy 0 < min <= max",
            ));
        }
        if !(0.0..=1.0).contains(&self.feature_dropout_rate) {
            return Err(Error::validation(
                "feature_dropout_rate must be in [0, 1]",
            ));
        }
        Ok(())
    }
}

/// Rectangle used to paste one image's content into another. Always lies
/// fully inside the image it was sampled for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CutMixBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Weak augmentation: horizontal flip, uniform rescale, crop to
/// `crop_size` x `crop_size` (padding with 0 / IGNORE when the rescaled
/// image is smaller). Image and mask receive the identical transform.
pub fn aug_weak(
    image: &Image,
    mask: Option<&Mask>,
    cfg: &AugConfig,
    seed: u64,
) -> Result<(Image, Option<Mask>)> {
    cfg.validate()?;
    let (c, h, w) = image.dim();
    if let Some(m) = mask {
        if m.dim() != (h, w) {
            return Err(Error::validation("mask shape differs from image"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // fixed draw order: flip, scale, crop row, crop col
    let flip = rng.random::<f64>() < cfg.hflip_prob;
    let u_scale = rng.random::<f64>();
    let u_top = rng.random::<f64>();
    let u_left = rng.random::<f64>();

    let mut img = image.clone();
    let mut msk = mask.cloned();
    if flip {
        img = flip_image(&img);
        msk = msk.map(|m| flip_mask(&m));
    }

    let scale = cfg.scale_range.0 + (cfg.scale_range.1 - cfg.scale_range.0) * u_scale;
    let nh = ((h as f64 * scale).round() as usize).max(1);
    let nw = ((w as f64 * scale).round() as usize).max(1);
    if (nh, nw) != (h, w) {
        let batched = img
            .insert_axis(Axis(0))
            .into_dimensionality::<Ix4>()
            .expect("image is rank 3");
        img = kernels::upsample_bilinear(&batched, nh, nw)
            .index_axis_move(Axis(0), 0);
        msk = msk.map(|m| resize_mask_nearest(&m, nh, nw));
    }

    let crop = cfg.crop_size;
    let avail_y = nh.saturating_sub(crop);
    let avail_x = nw.saturating_sub(crop);
    let top = (u_top * (avail_y + 1) as f64).floor() as usize;
    let left = (u_left * (avail_x + 1) as f64).floor() as usize;

    let mut out_img = Array3::<f64>::zeros((c, crop, crop));
    let mut out_msk = msk.as_ref().map(|_| Array2::<u8>::from_elem((crop, crop), IGNORE));
    let copy_h = crop.min(nh);
    let copy_w = crop.min(nw);
    for ci in 0..c {
        for y in 0..copy_h {
            for x in 0..copy_w {
                out_img[(ci, y, x)] = img[(ci, top + y, left + x)];
            }
        }
    }
    if let (Some(src), Some(dst)) = (msk.as_ref(), out_msk.as_mut()) {
        for y in 0..copy_h {
            for x in 0..copy_w {
                dst[(y, x)] = src[(top + y, left + x)];
            }
        }
    }
    Ok((out_img, out_msk))
}

fn flip_image(image: &Image) -> Image {
    let mut out = image.clone();
    out.invert_axis(Axis(2));
    out
}

fn flip_mask(mask: &Mask) -> Mask {
    let mut out = mask.clone();
    out.invert_axis(Axis(1));
    out
}

fn resize_mask_nearest(mask: &Mask, nh: usize, nw: usize) -> Mask {
    let (h, w) = mask.dim();
    let mut out = Array2::<u8>::zeros((nh, nw));
    for y in 0..nh {
        let sy = (((y as f64 + 0.5) * h as f64 / nh as f64).floor() as usize).min(h - 1);
        for x in 0..nw {
            let sx = (((x as f64 + 0.5) * w as f64 / nw as f64).floor() as usize).min(w - 1);
            out[(y, x)] = mask[(sy, sx)];
        }
    }
    out
}

/// Strong image augmentation: color jitter (brightness, contrast,
/// saturation in that order), optional grayscale, optional Gaussian blur.
/// Purely photometric; shape is unchanged and output stays in [0, 1].
pub fn aug_strong_image(image: &Image, cfg: &AugConfig, seed: u64) -> Result<Image> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // fixed draw order regardless of which branches fire
    let s = cfg.jitter_strength;
    let f_bright = 1.0 - s + 2.0 * s * rng.random::<f64>();
    let f_contrast = 1.0 - s + 2.0 * s * rng.random::<f64>();
    let f_sat = 1.0 - s + 2.0 * s * rng.random::<f64>();
    let gray = rng.random::<f64>() < cfg.grayscale_prob;
    let blur = rng.random::<f64>() < cfg.blur_prob;
    let (lo, hi) = cfg.blur_sigma_range;
    let sigma = lo + (hi - lo) * rng.random::<f64>();

    let mut img = image.mapv(|v| v * f_bright);
    let mean_luma = luma(&img).mean().unwrap_or(0.0);
    img.mapv_inplace(|v| mean_luma + f_contrast * (v - mean_luma));
    let l = luma(&img);
    let (_, h, w) = img.dim();
    for y in 0..h {
        for x in 0..w {
            let g = l[(y, x)];
            for c in 0..3 {
                img[(c, y, x)] = g + f_sat * (img[(c, y, x)] - g);
            }
        }
    }
    if gray {
        let l = luma(&img);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    img[(c, y, x)] = l[(y, x)];
                }
            }
        }
    }
    if blur {
        img = gaussian_blur(&img, sigma);
    }
    img.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(img)
}

fn luma(image: &Image) -> Array2<f64> {
    let (_, h, w) = image.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        0.299 * image[(0, y, x)] + 0.587 * image[(1, y, x)] + 0.114 * image[(2, y, x)]
    })
}

/// Separable Gaussian with kernel radius ⌈3σ⌉ and edge replication.
fn gaussian_blur(image: &Image, sigma: f64) -> Image {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-((i * i) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }
    let (c, h, w) = image.dim();
    let mut tmp = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let sx = (x as isize + ki as isize - radius).clamp(0, w as isize - 1);
                    acc += k * image[(ci, y, sx as usize)];
                }
                tmp[(ci, y, x)] = acc;
            }
        }
    }
    let mut out = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let sy = (y as isize + ki as isize - radius).clamp(0, h as isize - 1);
                    acc += k * tmp[(ci, sy as usize, x)];
                }
                out[(ci, y, x)] = acc;
            }
        }
    }
    out
}

/// Draws a box whose area fraction is 1 - λ for λ ~ Uniform(0,1). The box
/// keeps its sampled size; its position is shifted to fit inside the image,
/// so the expected area fraction stays at E[1 - λ] = 1/2.
pub fn sample_cutmix_box(h: usize, w: usize, seed: u64) -> CutMixBox {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lambda = rng.random::<f64>();
    let frac = (1.0 - lambda).sqrt();
    let bh = (h as f64 * frac).floor() as usize;
    let bw = (w as f64 * frac).floor() as usize;
    let cy = rng.random_range(0..h);
    let cx = rng.random_range(0..w);
    let top = cy.saturating_sub(bh / 2).min(h - bh);
    let left = cx.saturating_sub(bw / 2).min(w - bw);
    CutMixBox {
        top,
        left,
        height: bh,
        width: bw,
    }
}

fn check_box(bx: &CutMixBox, h: usize, w: usize) -> Result<()> {
    if bx.top + bx.height > h || bx.left + bx.width > w {
        return Err(Error::validation("cutmix box exceeds image bounds"));
    }
    Ok(())
}

/// Pastes `b`'s pixels inside the box onto `a`, channelwise.
pub fn apply_cutmix_channels(
    a: &Array3<f64>,
    b: &Array3<f64>,
    bx: &CutMixBox,
) -> Result<Array3<f64>> {
    if a.dim() != b.dim() {
        return Err(Error::validation("cutmix inputs differ in shape"));
    }
    let (c, h, w) = a.dim();
    check_box(bx, h, w)?;
    let mut out = a.clone();
    for ci in 0..c {
        for y in bx.top..bx.top + bx.height {
            for x in bx.left..bx.left + bx.width {
                out[(ci, y, x)] = b[(ci, y, x)];
            }
        }
    }
    Ok(out)
}

/// Pastes `b` inside the box onto `a` for a single-plane aux tensor
/// (pseudo-label classes, selection masks).
pub fn apply_cutmix_plane<T: Copy>(
    a: &Array2<T>,
    b: &Array2<T>,
    bx: &CutMixBox,
) -> Result<Array2<T>> {
    if a.dim() != b.dim() {
        return Err(Error::validation("cutmix inputs differ in shape"));
    }
    let (h, w) = a.dim();
    check_box(bx, h, w)?;
    let mut out = a.clone();
    for y in bx.top..bx.top + bx.height {
        for x in bx.left..bx.left + bx.width {
            out[(y, x)] = b[(y, x)];
        }
    }
    Ok(out)
}

/// Multiplicative mask for strong feature augmentation: each element is 0
/// with probability `rate`, else 1/(1 - rate), so expectation is preserved.
pub fn feature_dropout_mask(shape: &[usize], rate: f64, seed: u64) -> Result<ArrayD<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::validation(
            "feature_dropout_rate must be in [0, 1)",
        ));
    }
    if rate == 0.0 {
        return Ok(ArrayD::from_elem(IxDyn(shape), 1.0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 / (1.0 - rate);
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    Ok(ArrayD::from_shape_vec(IxDyn(shape), values).expect("shape matches length"))
}

/// Strong feature augmentation: inverted dropout applied elementwise.
pub fn aug_strong_feature(feature: &FeatureMap, rate: f64, seed: u64) -> Result<FeatureMap> {
    if rate == 0.0 {
        return Ok(feature.clone());
    }
    let mask = feature_dropout_mask(feature.shape(), rate, seed)?;
    let mask = mask.into_dimensionality::<Ix4>().expect("rank preserved");
    Ok(feature * &mask)
}
