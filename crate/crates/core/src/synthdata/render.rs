//! Procedural pedestrian rendering.
//!
//! A figure is drawn on a camera-tinted background: head with hair and a
//! 3x4 facial glyph, a torso block and two legs ending in shoes. Everything
//! except the torso and leg fabric is derived from the identity's
//! `base_pattern_seed`; the fabric colors come from the selected outfit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{IdentitySpec, Image, SampleRecord, Viewpoint};
use crate::error::{Error, Result};

/// Gray level used for occluders.
pub const OCCLUDER_GRAY: f64 = 0.5;

/// Standard deviation of the per-pixel Gaussian noise.
pub const PIXEL_NOISE: f64 = 0.02;

/// Identity-only appearance traits derived from `base_pattern_seed`.
#[derive(Clone, Debug)]
pub(crate) struct BodyShape {
    skin: [f64; 3],
    hair: [f64; 3],
    shoes: [f64; 3],
    hair_rows: usize,
    head_half: f64,
    torso_half: f64,
    leg_width: f64,
    leg_gap: f64,
    glyph: [bool; 12],
}

impl BodyShape {
    pub(crate) fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_b0d7);
        let tone = rng.random_range(0.35..0.9);
        let skin = [tone, tone * rng.random_range(0.7..0.85), tone * rng.random_range(0.5..0.7)];
        let hair = [rng.random_range(0.0..0.6), rng.random_range(0.0..0.45), rng.random_range(0.0..0.35)];
        let shoes = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
        let mut glyph = [false; 12];
        for g in glyph.iter_mut() {
            *g = rng.random_bool(0.5);
        }
        BodyShape {
            skin,
            hair,
            shoes,
            hair_rows: rng.random_range(1..=3),
            head_half: rng.random_range(1.8..3.2),
            torso_half: rng.random_range(3.5..6.5),
            leg_width: rng.random_range(1.5..3.2),
            leg_gap: rng.random_range(0.5..2.5),
            glyph,
        }
    }
}

/// Row bands of the figure for an image of height `h`.
#[derive(Clone, Copy, Debug)]
pub struct Layout {
    pub head: (usize, usize),
    pub upper: (usize, usize),
    pub lower: (usize, usize),
    pub shoes: (usize, usize),
}

impl Layout {
    pub fn for_height(h: usize) -> Self {
        let r = |f: f64| ((f * h as f64).round() as usize).min(h);
        Layout {
            head: (r(0.03), r(0.25)),
            upper: (r(0.25), r(0.6)),
            lower: (r(0.6), r(0.92)),
            shoes: (r(0.92), r(0.99).max(r(0.92) + 1).min(h)),
        }
    }

    /// Rows covered by occlusion: the torso (both clothing bands).
    pub fn torso(&self) -> (usize, usize) {
        (self.upper.0, self.lower.1)
    }
}

/// Which pixels of a rendered frame belong to which region.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Background,
    Identity,
    Clothing,
}

/// Region map of an unoccluded figure, row-major `h x w`.
pub(crate) fn region_map(shape: &BodyShape, viewpoint: Viewpoint, h: usize, w: usize) -> Vec<Region> {
    let mut map = figure_regions(shape, viewpoint, h, w);
    if viewpoint == Viewpoint::Back {
        mirror(&mut map, h, w);
    }
    map
}

/// Regions before the back-view mirror is applied.
fn figure_regions(shape: &BodyShape, viewpoint: Viewpoint, h: usize, w: usize) -> Vec<Region> {
    let layout = Layout::for_height(h);
    let scale = w as f64 / 16.0;
    let shift = match viewpoint {
        Viewpoint::Side => (2.0 * scale).round(),
        _ => 0.0,
    };
    let cx = w as f64 / 2.0 + shift;
    let inside = |x: usize, half: f64| ((x as f64 + 0.5) - cx).abs() < half * scale;
    let on_leg = |x: usize| {
        let d = ((x as f64 + 0.5) - cx).abs();
        let gap = shape.leg_gap * scale / 2.0;
        d >= gap && d < gap + shape.leg_width * scale
    };
    let mut map = vec![Region::Background; h * w];
    for y in 0..h {
        for x in 0..w {
            let region = if (layout.head.0..layout.head.1).contains(&y) {
                inside(x, shape.head_half).then_some(Region::Identity)
            } else if (layout.upper.0..layout.upper.1).contains(&y) {
                inside(x, shape.torso_half).then_some(Region::Clothing)
            } else if (layout.lower.0..layout.lower.1).contains(&y) {
                on_leg(x).then_some(Region::Clothing)
            } else if (layout.shoes.0..layout.shoes.1).contains(&y) {
                on_leg(x).then_some(Region::Identity)
            } else {
                None
            };
            map[y * w + x] = region.unwrap_or(Region::Background);
        }
    }
    map
}

fn mirror<T: Copy>(data: &mut [T], h: usize, w: usize) {
    for y in 0..h {
        data[y * w..(y + 1) * w].reverse();
    }
}

fn camera_background(camera_id: usize) -> [f64; 3] {
    let t = (camera_id % 5) as f64;
    [0.62 - 0.04 * t, 0.6 + 0.02 * t, 0.58 + 0.03 * (t % 2.0)]
}

fn camera_gain(camera_id: usize) -> f64 {
    [1.0, 0.92, 1.06, 0.96, 1.03][camera_id % 5]
}

/// Global brightness jitter amplitude applied on top of the camera gain.
pub const ILLUMINATION_JITTER: f64 = 0.06;

#[allow(clippy::too_many_arguments)]
pub(crate) fn render(
    spec: &IdentitySpec,
    clothing_id: usize,
    viewpoint: Viewpoint,
    occlusion: f64,
    camera_id: usize,
    noise_seed: u64,
    h: usize,
    w: usize,
) -> Result<Image> {
    if clothing_id >= spec.num_outfits {
        return Err(Error::config(
            "clothing_id",
            format!("{clothing_id} out of range for identity {} with {} outfits", spec.identity_id, spec.num_outfits),
        ));
    }
    if !(0.0..=1.0).contains(&occlusion) {
        return Err(Error::config("occlusion", format!("{occlusion} not in [0, 1]")));
    }
    let shape = BodyShape::from_seed(spec.base_pattern_seed);
    let outfit = &spec.outfit_palettes[clothing_id];
    let layout = Layout::for_height(h);
    let scale = w as f64 / 16.0;
    let shift = match viewpoint {
        Viewpoint::Side => (2.0 * scale).round(),
        _ => 0.0,
    };
    let cx = w as f64 / 2.0 + shift;
    let bg = camera_background(camera_id);

    // Draw the front-facing (or shifted) figure first, mirror for back views.
    let regions = figure_regions(&shape, viewpoint, h, w);
    let mut px = vec![[0.0f64; 3]; h * w];
    let face_top = layout.head.0 + shape.hair_rows;
    for y in 0..h {
        for x in 0..w {
            let color = match regions[y * w + x] {
                Region::Background => bg,
                Region::Identity if y < layout.head.1 => {
                    if y < face_top {
                        shape.hair
                    } else {
                        // 3 columns x 4 rows glyph stretched over the face.
                        let fy = (y - face_top) * 4 / (layout.head.1 - face_top).max(1);
                        let fx = (((x as f64 + 0.5) - (cx - shape.head_half * scale)) / (2.0 * shape.head_half * scale) * 3.0)
                            .clamp(0.0, 2.999) as usize;
                        if shape.glyph[fy.min(3) * 3 + fx] {
                            shape.skin.map(|c| c * 0.55)
                        } else {
                            shape.skin
                        }
                    }
                }
                Region::Identity => shape.shoes,
                Region::Clothing if y < layout.upper.1 => outfit.upper,
                Region::Clothing => outfit.lower,
            };
            px[y * w + x] = color;
        }
    }
    if viewpoint == Viewpoint::Back {
        mirror(&mut px, h, w);
    }

    if occlusion > 0.0 {
        let (t0, t1) = layout.torso();
        let rows = ((t1 - t0) as f64 * occlusion).round() as usize;
        for y in t1 - rows..t1 {
            for x in 0..w {
                px[y * w + x] = [OCCLUDER_GRAY; 3];
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let gain = camera_gain(camera_id) * (1.0 + rng.random_range(-ILLUMINATION_JITTER..=ILLUMINATION_JITTER));
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("valid normal");
    let mut data = Vec::with_capacity(h * w * 3);
    for p in px {
        for c in p {
            data.push((c * gain + noise.sample(&mut rng)).clamp(0.0, 1.0));
        }
    }
    Ok(Image::new(h, w, data))
}

/// Public region map for tests and analysis tools.
pub fn clothing_mask(spec: &IdentitySpec, viewpoint: Viewpoint, h: usize, w: usize) -> Vec<bool> {
    let shape = BodyShape::from_seed(spec.base_pattern_seed);
    region_map(&shape, viewpoint, h, w).into_iter().map(|r| r == Region::Clothing).collect()
}

/// Builds a [`SampleRecord`] around a rendered image.
#[allow(clippy::too_many_arguments)]
pub(crate) fn record(
    sample_id: usize,
    spec: &IdentitySpec,
    clothing_id: usize,
    viewpoint: Viewpoint,
    occlusion: f64,
    camera_id: usize,
    noise_seed: u64,
    size: (usize, usize),
) -> Result<SampleRecord> {
    let image = render(spec, clothing_id, viewpoint, occlusion, camera_id, noise_seed, size.0, size.1)?;
    Ok(SampleRecord {
        sample_id,
        identity_id: spec.identity_id,
        clothing_id,
        camera_id,
        viewpoint,
        occlusion,
        image,
    })
}
