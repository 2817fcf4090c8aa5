//! Training-time augmentation: random crop, resize, rotation and cutout.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::image::GrayImage;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("crop of {crop}px exceeds image of {width}x{height}")]
    CropTooLarge { crop: usize, width: usize, height: usize },
    #[error("invalid augmentation setting: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Crop {
    None,
    /// Square crop whose side is this fraction of the shorter image side.
    Fraction(f64),
    /// Square crop of a fixed side in pixels.
    Pixels(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Side of the (square) output, i.e. the model input side.
    pub output_side: usize,
    pub crop: Crop,
    /// Rotation angle is drawn uniformly from `[-max, max]` degrees; 0 disables.
    pub max_rotation_deg: f64,
    /// Cutout hole side as a fraction of the output side; 0 disables.
    pub cutout_fraction: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            output_side: 448,
            crop: Crop::Fraction(0.875),
            max_rotation_deg: 10.0,
            cutout_fraction: 0.25,
        }
    }
}

impl AugmentConfig {
    /// Resize only.
    pub fn disabled(output_side: usize) -> Self {
        Self {
            output_side,
            crop: Crop::None,
            max_rotation_deg: 0.0,
            cutout_fraction: 0.0,
        }
    }
}

/// Applies crop -> resize -> rotation -> cutout. Deterministic given `rng`.
pub fn augment<R: Rng + ?Sized>(
    image: &GrayImage,
    config: &AugmentConfig,
    rng: &mut R,
) -> Result<GrayImage, AugmentError> {
    if config.output_side == 0 {
        return Err(AugmentError::Invalid("output_side must be positive".into()));
    }
    if !(0.0..=1.0).contains(&config.cutout_fraction) {
        return Err(AugmentError::Invalid(format!(
            "cutout_fraction {} outside [0, 1]",
            config.cutout_fraction
        )));
    }
    let (w, h) = (image.width(), image.height());
    let crop_side = match config.crop {
        Crop::None => None,
        Crop::Fraction(f) if f > 0.0 && f <= 1.0 => Some(((w.min(h) as f64) * f).round().max(1.0) as usize),
        Crop::Fraction(f) if f > 1.0 => {
            return Err(AugmentError::CropTooLarge {
                crop: ((w.min(h) as f64) * f).round() as usize,
                width: w,
                height: h,
            })
        }
        Crop::Fraction(f) => return Err(AugmentError::Invalid(format!("crop fraction {f}"))),
        Crop::Pixels(p) => Some(p),
    };

    let cropped = match crop_side {
        Some(side) if side > w || side > h || side == 0 => {
            return Err(AugmentError::CropTooLarge {
                crop: side,
                width: w,
                height: h,
            })
        }
        Some(side) => {
            let x = rng.random_range(0..=w - side);
            let y = rng.random_range(0..=h - side);
            image.crop(x, y, side, side)
        }
        None => image.clone(),
    };
    let mut out = cropped.resize(config.output_side, config.output_side);

    if config.max_rotation_deg > 0.0 {
        let angle = rng.random_range(-config.max_rotation_deg..=config.max_rotation_deg);
        if angle != 0.0 {
            out = rotate(&out, angle.to_radians());
        }
    }
    if config.cutout_fraction > 0.0 {
        let side = ((config.output_side as f64) * config.cutout_fraction).round() as usize;
        if side > 0 {
            let side = side.min(config.output_side);
            let fill = out.mean();
            let x0 = rng.random_range(0..=config.output_side - side);
            let y0 = rng.random_range(0..=config.output_side - side);
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    out.set(x, y, fill);
                }
            }
        }
    }
    Ok(out)
}

/// Rotation about the image center; uncovered corners take the image mean.
fn rotate(image: &GrayImage, radians: f64) -> GrayImage {
    let (w, h) = (image.width(), image.height());
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (sin, cos) = radians.sin_cos();
    let fill = image.mean();
    let mut out = GrayImage::filled(w, h, fill);
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            // inverse mapping from destination to source
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            if sx >= -0.5 && sy >= -0.5 && sx <= w as f64 - 0.5 && sy <= h as f64 - 0.5 {
                out.set(x, y, image.sample_bilinear(sx, sy));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(w: usize, h: usize) -> GrayImage {
        let data = (0..w * h).map(|i| (i % 97) as f32 / 97.0).collect();
        GrayImage::new(w, h, data).unwrap()
    }

    #[test]
    fn disabled_is_resize_only() {
        let img = ramp(40, 30);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment(&img, &AugmentConfig::disabled(16), &mut rng).unwrap();
        assert_eq!(out, img.resize(16, 16));
    }

    #[test]
    fn full_frame_crop_no_rotation_no_cutout_is_identity_after_resize() {
        let img = ramp(24, 24);
        let cfg = AugmentConfig {
            output_side: 24,
            crop: Crop::Fraction(1.0),
            max_rotation_deg: 0.0,
            cutout_fraction: 0.0,
        };
        let out = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn same_rng_state_gives_bit_identical_output() {
        let img = ramp(64, 64);
        let cfg = AugmentConfig {
            output_side: 32,
            ..AugmentConfig::default()
        };
        let a = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a.data(), b.data());
        let c = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn cutout_fills_with_mean() {
        let img = ramp(32, 32);
        let cfg = AugmentConfig {
            output_side: 32,
            crop: Crop::None,
            max_rotation_deg: 0.0,
            cutout_fraction: 0.25,
        };
        let out = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mean = img.mean();
        let filled = out.data().iter().filter(|&&v| v == mean).count();
        assert!(filled >= 64);
    }

    #[test]
    fn oversized_crop_is_rejected() {
        let img = ramp(16, 16);
        let cfg = AugmentConfig {
            crop: Crop::Pixels(20),
            ..AugmentConfig::disabled(16)
        };
        let err = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert_eq!(
            err,
            AugmentError::CropTooLarge {
                crop: 20,
                width: 16,
                height: 16
            }
        );
    }
}
