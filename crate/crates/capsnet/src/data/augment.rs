//! Randomized image augmentation: one composed affine transform (rotation
//! about the center, shear, translation) with bilinear sampling and zero
//! fill, followed by contrast and brightness scaling with a final clamp to
//! `[0, 1]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledImage;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Augmentation magnitudes. Angles are sampled uniformly from
/// `[-rotation_deg, +rotation_deg]`, the shear angle (radians) from
/// `[-shear, +shear]`, shifts as fractions of the image side, and
/// brightness/contrast as multiplicative factors from their ranges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub rotation_deg: f64,
    pub shear: f64,
    pub width_shift_frac: f64,
    pub height_shift_frac: f64,
    pub brightness_range: (f64, f64),
    pub contrast_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_deg: 20.0,
            shear: 0.2,
            width_shift_frac: 0.2,
            height_shift_frac: 0.2,
            brightness_range: (0.6, 1.5),
            contrast_range: (0.6, 1.5),
        }
    }
}

impl AugmentConfig {
    /// A config under which [`augment`] is the bitwise identity.
    pub fn identity() -> Self {
        AugmentConfig {
            rotation_deg: 0.0,
            shear: 0.0,
            width_shift_frac: 0.0,
            height_shift_frac: 0.0,
            brightness_range: (1.0, 1.0),
            contrast_range: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let magnitudes = [
            self.rotation_deg,
            self.shear,
            self.width_shift_frac,
            self.height_shift_frac,
        ];
        if magnitudes.iter().any(|&m| m < 0.0 || !m.is_finite()) {
            return Err(Error::contract(
                "augmentation magnitudes must be finite and non-negative",
            ));
        }
        for (lo, hi) in [self.brightness_range, self.contrast_range] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::contract(format!(
                    "factor range [{}, {}] must satisfy lo <= hi",
                    lo, hi
                )));
            }
        }
        Ok(())
    }
}

fn sample_symmetric(rng: &mut impl Rng, magnitude: f64) -> f64 {
    if magnitude > 0.0 {
        rng.gen_range(-magnitude..magnitude)
    } else {
        0.0
    }
}

fn sample_range(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Apply one random draw of the configured augmentations. The label and
/// image dimensions never change, outputs stay in `[0, 1]`, and the
/// all-identity config reproduces the input bitwise.
pub fn augment(image: &LabeledImage, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<LabeledImage> {
    cfg.validate()?;
    let shape = image.pixels.shape();
    let (channels, height, width) = (shape[0], shape[1], shape[2]);

    // Fixed draw order: rotation, shear, shifts, brightness, contrast.
    let theta = sample_symmetric(rng, cfg.rotation_deg).to_radians();
    let shear = sample_symmetric(rng, cfg.shear);
    let dx = sample_symmetric(rng, cfg.width_shift_frac) * width as f64;
    let dy = sample_symmetric(rng, cfg.height_shift_frac) * height as f64;
    let brightness = sample_range(rng, cfg.brightness_range);
    let contrast = sample_range(rng, cfg.contrast_range);

    let mut pixels = image.pixels.data().to_vec();

    if theta != 0.0 || shear != 0.0 || dx != 0.0 || dy != 0.0 {
        pixels = affine_bilinear(&pixels, channels, height, width, theta, shear, dx, dy);
    }

    if contrast != 1.0 || brightness != 1.0 {
        let plane = height * width;
        for c in 0..channels {
            let slice = &mut pixels[c * plane..(c + 1) * plane];
            let mean = slice.iter().map(|&p| p as f64).sum::<f64>() / plane as f64;
            for p in slice.iter_mut() {
                let adjusted = (contrast * (*p as f64 - mean) + mean) * brightness;
                *p = adjusted.clamp(0.0, 1.0) as f32;
            }
        }
    }

    Ok(LabeledImage {
        pixels: Tensor::from_vec(shape.to_vec(), pixels)?,
        label: image.label,
        class_name: image.class_name.clone(),
    })
}

/// Destination pixel (x', y') samples the source at
/// `A^-1 ((x', y') - c - t) + c` where `A = R(theta) . Shear(shear)`
/// about the image center `c`, with bilinear taps and zero fill.
#[allow(clippy::too_many_arguments)]
fn affine_bilinear(
    src: &[f32],
    channels: usize,
    height: usize,
    width: usize,
    theta: f64,
    shear: f64,
    dx: f64,
    dy: f64,
) -> Vec<f32> {
    let (cos_t, sin_t) = (theta.cos(), theta.sin());
    let sh = shear.tan();
    // A = R . Sh with Sh = [[1, sh], [0, 1]].
    let a = [cos_t, cos_t * sh - sin_t, sin_t, sin_t * sh + cos_t];
    let det = a[0] * a[3] - a[1] * a[2];
    let inv = [a[3] / det, -a[1] / det, -a[2] / det, a[0] / det];
    let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);

    let plane = height * width;
    let mut out = vec![0.0f32; src.len()];
    for y in 0..height {
        for x in 0..width {
            let rx = x as f64 - cx - dx;
            let ry = y as f64 - cy - dy;
            let sx = inv[0] * rx + inv[1] * ry + cx;
            let sy = inv[2] * rx + inv[3] * ry + cy;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let wx = sx - x0;
            let wy = sy - y0;
            for c in 0..channels {
                let tap = |xi: f64, yi: f64| -> f64 {
                    if xi < 0.0 || yi < 0.0 || xi >= width as f64 || yi >= height as f64 {
                        0.0
                    } else {
                        src[c * plane + yi as usize * width + xi as usize] as f64
                    }
                };
                let top = tap(x0, y0) * (1.0 - wx) + tap(x0 + 1.0, y0) * wx;
                let bottom = tap(x0, y0 + 1.0) * (1.0 - wx) + tap(x0 + 1.0, y0 + 1.0) * wx;
                out[c * plane + y * width + x] = (top * (1.0 - wy) + bottom * wy) as f32;
            }
        }
    }
    out
}
