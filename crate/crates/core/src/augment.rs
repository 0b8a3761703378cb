//! Stochastic image augmentation: horizontal flip, contrast scaling about
//! the mean, rotation, and crop-and-resize, applied in that order.

use std::f64::consts::FRAC_PI_4;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::image::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    pub flip_prob: f64,
    pub contrast_range: [f64; 2],
    /// Radians.
    pub rotation_range: [f64; 2],
    /// Fraction of each linear extent removed before resizing back.
    pub crop_fraction_range: [f64; 2],
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            contrast_range: [0.7, 1.3],
            rotation_range: [-FRAC_PI_4, FRAC_PI_4],
            crop_fraction_range: [0.01, 0.20],
        }
    }
}

impl AugmentPolicy {
    /// A policy whose every draw leaves the image untouched.
    pub fn identity() -> Self {
        Self { flip_prob: 0.0, contrast_range: [1.0, 1.0], rotation_range: [0.0, 0.0], crop_fraction_range: [0.0, 0.0] }
    }

    pub fn validate(&self) -> Result<(), String> {
        let ordered = |name: &str, r: [f64; 2]| {
            if r[0].is_finite() && r[1].is_finite() && r[0] <= r[1] {
                Ok(())
            } else {
                Err(format!("augment.{name} must be an ordered finite range, got {r:?}"))
            }
        };
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(format!("augment.flip_prob must lie in [0, 1], got {}", self.flip_prob));
        }
        ordered("contrast_range", self.contrast_range)?;
        ordered("rotation_range", self.rotation_range)?;
        ordered("crop_fraction_range", self.crop_fraction_range)?;
        if self.contrast_range[0] < 0.0 {
            return Err("augment.contrast_range must be non-negative".into());
        }
        if self.crop_fraction_range[0] < 0.0 || self.crop_fraction_range[1] >= 1.0 {
            return Err(format!("augment.crop_fraction_range must lie in [0, 1), got {:?}", self.crop_fraction_range));
        }
        Ok(())
    }
}

/// One concrete draw from a policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub contrast: f32,
    pub angle: f32,
    pub crop_fraction: f32,
    /// Position of the crop window inside the available slack, each in `[0, 1]`.
    pub crop_offset: (f32, f32),
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, r: [f64; 2]) -> f64 {
    r[0] + (r[1] - r[0]) * rng.gen::<f64>()
}

impl AugmentParams {
    pub fn sample<R: Rng + ?Sized>(policy: &AugmentPolicy, rng: &mut R) -> Self {
        let flip = rng.gen::<f64>() < policy.flip_prob;
        let contrast = uniform(rng, policy.contrast_range) as f32;
        let angle = uniform(rng, policy.rotation_range) as f32;
        let crop_fraction = uniform(rng, policy.crop_fraction_range) as f32;
        let crop_offset = (rng.gen::<f32>(), rng.gen::<f32>());
        Self { flip, contrast, angle, crop_fraction, crop_offset }
    }
}

pub fn flip_horizontal(img: &Image) -> Image {
    let w = img.width();
    Image::from_fn(img.height(), w, |y, x| img.get(y, w - 1 - x))
}

/// `mean + factor·(x − mean)`, clamped to `[0, 1]`.
pub fn adjust_contrast(img: &Image, factor: f32) -> Image {
    if factor == 1.0 {
        return img.clone();
    }
    let mean = img.mean();
    let mut out = Image::new(img.height(), img.width(), img.pixels().iter().map(|&v| mean + factor * (v - mean)).collect());
    out.clamp01();
    out
}

/// Rotation about the image centre with bilinear resampling; uncovered
/// pixels become 0.
pub fn rotate(img: &Image, angle: f32) -> Image {
    if angle == 0.0 {
        return img.clone();
    }
    let (h, w) = (img.height(), img.width());
    let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
    let (s, c) = angle.sin_cos();
    Image::from_fn(h, w, |y, x| {
        let (dy, dx) = (y as f32 - cy, x as f32 - cx);
        // Inverse rotation maps the output pixel back into the source.
        let sx = c * dx + s * dy + cx;
        let sy = -s * dx + c * dy + cy;
        img.sample_bilinear(sy, sx)
    })
}

/// Removes `fraction` of each linear extent at the given offset, then
/// resizes the window back to the full size bilinearly.
pub fn crop_resize(img: &Image, fraction: f32, offset: (f32, f32)) -> Image {
    if fraction == 0.0 {
        return img.clone();
    }
    let (h, w) = (img.height() as f32, img.width() as f32);
    let (ch, cw) = ((1.0 - fraction) * h, (1.0 - fraction) * w);
    let (oy, ox) = (offset.0 * fraction * h, offset.1 * fraction * w);
    let (sy, sx) = (ch / h, cw / w);
    Image::from_fn(img.height(), img.width(), |y, x| {
        let src_y = (oy + (y as f32 + 0.5) * sy - 0.5).clamp(0.0, h - 1.0);
        let src_x = (ox + (x as f32 + 0.5) * sx - 0.5).clamp(0.0, w - 1.0);
        img.sample_bilinear(src_y, src_x)
    })
}

pub fn apply(img: &Image, p: &AugmentParams) -> Image {
    let mut out = if p.flip { flip_horizontal(img) } else { img.clone() };
    out = adjust_contrast(&out, p.contrast);
    out = rotate(&out, p.angle);
    out = crop_resize(&out, p.crop_fraction, p.crop_offset);
    out.clamp01();
    out
}

/// Draws parameters from `policy` and applies them.
pub fn augment<R: Rng + ?Sized>(img: &Image, policy: &AugmentPolicy, rng: &mut R) -> Image {
    let params = AugmentParams::sample(policy, rng);
    apply(img, &params)
}
