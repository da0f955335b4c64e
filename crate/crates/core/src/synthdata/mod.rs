//! Seeded synthetic cloth-changing benchmark.
//!
//! Each identity owns a persistent body pattern (skin, hair, facial glyph,
//! shoe color, head/torso/leg geometry) and a small wardrobe of outfits, each
//! an upper and a lower fabric color. Samples vary in outfit, viewpoint
//! (front, mirrored back, shifted side), occlusion (a gray band rising from
//! the bottom of the torso), camera tint and brightness, and pixel noise.
//!
//! Training identities are disjoint from the held-out identities used for the
//! query and gallery splits. For every held-out identity the first image of
//! each outfit becomes a query; the gallery therefore holds both same-clothes
//! and cross-clothes positives.

pub mod augment;
pub mod io;
mod render;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use render::{clothing_mask, Layout, ILLUMINATION_JITTER, OCCLUDER_GRAY, PIXEL_NOISE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Viewpoint {
    Front,
    Back,
    Side,
}

impl Viewpoint {
    pub const ALL: [Viewpoint; 3] = [Viewpoint::Front, Viewpoint::Back, Viewpoint::Side];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

/// Upper and lower fabric colors of one outfit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutfitPalette {
    pub upper: [f64; 3],
    pub lower: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentitySpec {
    pub identity_id: usize,
    pub base_pattern_seed: u64,
    pub num_outfits: usize,
    pub outfit_palettes: Vec<OutfitPalette>,
}

impl IdentitySpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_outfits == 0 || self.num_outfits != self.outfit_palettes.len() {
            return Err(Error::config(
                "num_outfits",
                format!("{} outfits declared, {} palettes given", self.num_outfits, self.outfit_palettes.len()),
            ));
        }
        Ok(())
    }
}

/// An `H x W x 3` image with values in `[0, 1]`, stored row-major HWC.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width * 3);
        Image { height, width, data }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Channel-major copy `(3, H, W)` as consumed by the backbone.
    pub fn to_chw(&self) -> Vec<f64> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                out[c * hw + p] = self.data[p * 3 + c];
            }
        }
        out
    }

    pub fn is_valid(&self) -> bool {
        self.data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }

    pub fn mse(&self, other: &Image) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / self.data.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub sample_id: usize,
    pub identity_id: usize,
    /// Ground-truth outfit; used only by evaluation protocols and the
    /// clothing-label ablation.
    pub clothing_id: usize,
    pub camera_id: usize,
    pub viewpoint: Viewpoint,
    pub occlusion: f64,
    pub image: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub split: Split,
    pub seed: u64,
    pub records: Vec<SampleRecord>,
}

impl DatasetManifest {
    /// Total image count.
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Sorted distinct identity ids.
    pub fn identities(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.records.iter().map(|r| r.identity_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn num_identities(&self) -> usize {
        self.identities().len()
    }
}

/// Train, query and gallery splits plus the identities that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub params: GenerateParams,
    pub identities: Vec<IdentitySpec>,
    pub train: DatasetManifest,
    pub query: DatasetManifest,
    pub gallery: DatasetManifest,
}

impl Benchmark {
    pub fn image_size(&self) -> (usize, usize) {
        (self.params.image_size[0], self.params.image_size[1])
    }
}

/// Source of a benchmark. Only the synthetic backend exists; real datasets
/// would plug in here.
pub trait DatasetSource {
    fn load(&self) -> Result<Benchmark>;
}

impl DatasetSource for GenerateParams {
    fn load(&self) -> Result<Benchmark> {
        generate_dataset(self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateParams {
    pub seed: u64,
    /// Training identities.
    pub n_identities: usize,
    /// Held-out identities for query/gallery.
    pub n_test_identities: usize,
    /// Inclusive `[min, max]` outfits per identity.
    pub outfits_per_id: [usize; 2],
    /// Inclusive `[min, max]` images per outfit.
    pub images_per_outfit: [usize; 2],
    pub n_cameras: usize,
    /// `[height, width]`.
    pub image_size: [usize; 2],
    /// Probability that a sample carries an occluder.
    pub occlusion_prob: f64,
}

impl Default for GenerateParams {
    fn default() -> Self {
        GenerateParams {
            seed: 7,
            n_identities: 12,
            n_test_identities: 10,
            outfits_per_id: [3, 3],
            images_per_outfit: [6, 6],
            n_cameras: 3,
            image_size: [32, 16],
            occlusion_prob: 0.15,
        }
    }
}

impl GenerateParams {
    /// All problems with the parameters, empty when valid.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.n_identities < 2 {
            out.push(format!("data.generate.n_identities: must be >= 2, got {}", self.n_identities));
        }
        if self.n_test_identities == 0 {
            out.push("data.generate.n_test_identities: must be >= 1".into());
        }
        for (name, [lo, hi]) in [("outfits_per_id", self.outfits_per_id), ("images_per_outfit", self.images_per_outfit)] {
            if lo == 0 || lo > hi {
                out.push(format!("data.generate.{name}: range [{lo}, {hi}] is empty or starts at 0"));
            }
        }
        if self.n_cameras == 0 {
            out.push("data.generate.n_cameras: must be >= 1".into());
        }
        if self.image_size.iter().any(|&s| s < 8) {
            out.push(format!("data.generate.image_size: each side must be >= 8, got {:?}", self.image_size));
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            out.push(format!("data.generate.occlusion_prob: {} not in [0, 1]", self.occlusion_prob));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        match problems.len() {
            0 => Ok(()),
            1 => {
                let (field, reason) = problems[0].split_once(": ").unwrap_or(("data", &problems[0]));
                Err(Error::config(field, reason))
            }
            _ => Err(Error::ConfigList(problems)),
        }
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)]
}

fn palette_distance(a: &OutfitPalette, b: &OutfitPalette) -> f64 {
    a.upper
        .iter()
        .chain(&a.lower)
        .zip(b.upper.iter().chain(&b.lower))
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Minimum palette distance between two outfits of one identity.
pub const MIN_OUTFIT_DISTANCE: f64 = 0.5;

fn identity_spec(identity_id: usize, num_outfits: usize, rng: &mut ChaCha8Rng) -> IdentitySpec {
    let base_pattern_seed = rng.random();
    let mut palettes: Vec<OutfitPalette> = Vec::with_capacity(num_outfits);
    while palettes.len() < num_outfits {
        let mut candidate = OutfitPalette {
            upper: random_color(rng),
            lower: random_color(rng),
        };
        for _ in 0..100 {
            if palettes.iter().all(|p| palette_distance(p, &candidate) >= MIN_OUTFIT_DISTANCE) {
                break;
            }
            candidate = OutfitPalette {
                upper: random_color(rng),
                lower: random_color(rng),
            };
        }
        palettes.push(candidate);
    }
    IdentitySpec {
        identity_id,
        base_pattern_seed,
        num_outfits,
        outfit_palettes: palettes,
    }
}

/// Draws the (outfit, viewpoint, occlusion, noise seed) tuples of one identity.
fn identity_shots(spec: &IdentitySpec, images: [usize; 2], min_per_outfit: usize, occ_prob: f64, rng: &mut ChaCha8Rng) -> Vec<(usize, Viewpoint, f64, u64)> {
    let mut shots = Vec::new();
    for outfit in 0..spec.num_outfits {
        let count = rng.random_range(images[0]..=images[1]).max(min_per_outfit);
        for _ in 0..count {
            let viewpoint = Viewpoint::ALL[rng.random_range(0..3)];
            let occlusion = if rng.random_bool(occ_prob) { rng.random_range(0.1..0.4) } else { 0.0 };
            shots.push((outfit, viewpoint, occlusion, rng.random()));
        }
    }
    shots
}

/// Generates the train/query/gallery benchmark for `params`.
pub fn generate_dataset(params: &GenerateParams) -> Result<Benchmark> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let size = (params.image_size[0], params.image_size[1]);
    let total_ids = params.n_identities + params.n_test_identities;
    let identities: Vec<IdentitySpec> = (0..total_ids)
        .map(|id| {
            let outfits = rng.random_range(params.outfits_per_id[0]..=params.outfits_per_id[1]);
            identity_spec(id, outfits, &mut rng)
        })
        .collect();

    let mut next_id = 0;
    let mut train = Vec::new();
    for spec in &identities[..params.n_identities] {
        for (outfit, vp, occ, noise) in identity_shots(spec, params.images_per_outfit, 1, params.occlusion_prob, &mut rng) {
            let camera = train.len() % params.n_cameras;
            train.push(render::record(next_id, spec, outfit, vp, occ, camera, noise, size)?);
            next_id += 1;
        }
    }

    let mut query = Vec::new();
    let mut gallery = Vec::new();
    let mut test_count = 0;
    for spec in &identities[params.n_identities..] {
        let shots = identity_shots(spec, params.images_per_outfit, 2, params.occlusion_prob, &mut rng);
        let mut seen_outfit = vec![false; spec.num_outfits];
        for (outfit, vp, occ, noise) in shots {
            let camera = test_count % params.n_cameras;
            test_count += 1;
            let rec = render::record(next_id, spec, outfit, vp, occ, camera, noise, size)?;
            next_id += 1;
            if seen_outfit[outfit] {
                gallery.push(rec);
            } else {
                seen_outfit[outfit] = true;
                query.push(rec);
            }
        }
    }

    let manifest = |split, records| DatasetManifest {
        split,
        seed: params.seed,
        records,
    };
    Ok(Benchmark {
        params: params.clone(),
        identities,
        train: manifest(Split::Train, train),
        query: manifest(Split::Query, query),
        gallery: manifest(Split::Gallery, gallery),
    })
}

/// Renders one sample of `spec`.
#[allow(clippy::too_many_arguments)]
pub fn render_sample(
    spec: &IdentitySpec,
    clothing_id: usize,
    viewpoint: Viewpoint,
    occlusion: f64,
    camera_id: usize,
    noise_seed: u64,
    image_size: (usize, usize),
) -> Result<SampleRecord> {
    spec.validate()?;
    render::record(0, spec, clothing_id, viewpoint, occlusion, camera_id, noise_seed, image_size)
}
