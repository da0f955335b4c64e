//! Train-time pixel augmentation: horizontal flip, pad-and-crop, random erasing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub flip_prob: f64,
    /// Edge-replicating padding on every side before the random crop.
    pub pad: usize,
    pub erase_prob: f64,
    /// Erased area as a fraction of the image, `[min, max]`.
    pub erase_area: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            flip_prob: 0.5,
            pad: 2,
            erase_prob: 0.5,
            erase_area: [0.02, 0.2],
        }
    }
}

pub fn hflip(img: &Image) -> Image {
    let mut data = Vec::with_capacity(img.data.len());
    for y in 0..img.height {
        for x in (0..img.width).rev() {
            data.extend_from_slice(&img.pixel(y, x));
        }
    }
    Image::new(img.height, img.width, data)
}

/// Pads by `pad` replicating the border pixels and crops back to the
/// original size at offset `(dy, dx)` in the padded frame.
pub fn pad_crop(img: &Image, pad: usize, dy: usize, dx: usize) -> Image {
    let (h, w) = (img.height, img.width);
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        let sy = ((y + dy) as isize - pad as isize).clamp(0, h as isize - 1) as usize;
        for x in 0..w {
            let sx = ((x + dx) as isize - pad as isize).clamp(0, w as isize - 1) as usize;
            data.extend_from_slice(&img.pixel(sy, sx));
        }
    }
    Image::new(h, w, data)
}

/// Applies the configured augmentation chain with randomness from `rng`.
pub fn augment<R: Rng>(img: &Image, cfg: &AugmentConfig, rng: &mut R) -> Image {
    if !cfg.enabled {
        return img.clone();
    }
    let mut out = if rng.random_bool(cfg.flip_prob) { hflip(img) } else { img.clone() };
    if cfg.pad > 0 {
        let dy = rng.random_range(0..=2 * cfg.pad);
        let dx = rng.random_range(0..=2 * cfg.pad);
        out = pad_crop(&out, cfg.pad, dy, dx);
    }
    if rng.random_bool(cfg.erase_prob) {
        let (h, w) = (out.height, out.width);
        let area = rng.random_range(cfg.erase_area[0]..=cfg.erase_area[1]) * (h * w) as f64;
        let aspect: f64 = rng.random_range(0.3f64.ln()..=(1.0f64 / 0.3).ln()).exp();
        let eh = ((area * aspect).sqrt().round() as usize).clamp(1, h);
        let ew = ((area / aspect).sqrt().round() as usize).clamp(1, w);
        let y0 = rng.random_range(0..=h - eh);
        let x0 = rng.random_range(0..=w - ew);
        for y in y0..y0 + eh {
            for x in x0..x0 + ew {
                for c in 0..3 {
                    out.data[(y * w + x) * 3 + c] = rng.random_range(0.0..1.0);
                }
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

    fn ramp() -> Image {
        Image::new(4, 3, (0..36).map(|v| v as f64 / 36.0).collect())
    }

    #[test]
    fn flip_twice_is_identity() {
        let img = ramp();
        assert_eq!(hflip(&hflip(&img)), img);
        assert_eq!(hflip(&img).pixel(0, 0), img.pixel(0, 2));
    }

    #[test]
    fn centered_crop_is_identity() {
        let img = ramp();
        assert_eq!(pad_crop(&img, 2, 2, 2), img);
        let shifted = pad_crop(&img, 2, 0, 0);
        assert_eq!(shifted.pixel(2, 2), img.pixel(0, 0));
        assert_eq!(shifted.pixel(0, 0), img.pixel(0, 0));
        assert_eq!(shifted.pixel(1, 2), img.pixel(0, 0));
    }

    #[test]
    fn augmented_images_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = ramp();
        for _ in 0..200 {
            let out = augment(&img, &AugmentConfig::default(), &mut rng);
            assert!(out.is_valid());
            assert_eq!((out.height, out.width), (4, 3));
        }
    }

    #[test]
    fn disabled_is_passthrough() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = AugmentConfig {
            enabled: false,
            ..Default::default()
        };
        assert_eq!(augment(&ramp(), &cfg, &mut rng), ramp());
    }
}
