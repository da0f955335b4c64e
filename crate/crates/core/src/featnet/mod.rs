//! Convolutional feature extractor, identity classifier head and part
//! splitting.
//!
//! The backbone is a stack of `3x3 conv -> group norm -> ReLU` stages. Group
//! normalization keeps every sample's forward pass independent of the rest of
//! the batch, so training and evaluation use the same code path. The output of
//! the last stage is the spatial feature map; global pooling gives the
//! embedding. By default the last stage is a plain biased convolution: a
//! normalization right before average pooling would flatten exactly the
//! per-channel means that the pooled embedding is made of.

mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::synthdata::Image;
use crate::tensor::Tensor;

pub use crate::autodiff::Pooling;
pub use params::{BoundParams, ParamSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Output channels of every stage but the last.
    pub widths: Vec<usize>,
    /// Stride of every stage but the last.
    pub strides: Vec<usize>,
    /// Channels of the last stage, i.e. the embedding dimension `C`.
    pub embed_dim: usize,
    /// Stride of the last stage.
    pub final_stride: usize,
    pub pooling: Pooling,
    /// Group-norm groups per stage.
    pub norm_groups: usize,
    /// Last stage is `conv + bias` without normalization or ReLU.
    pub linear_head: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            widths: vec![16, 32, 64],
            strides: vec![2, 2, 1],
            embed_dim: 64,
            final_stride: 1,
            pooling: Pooling::Avg,
            norm_groups: 4,
            linear_head: true,
        }
    }
}

const NORM_EPS: f64 = 1e-5;

impl BackboneConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.widths.len() != self.strides.len() {
            out.push(format!(
                "backbone.strides: {} strides for {} widths",
                self.strides.len(),
                self.widths.len()
            ));
        }
        if self.widths.iter().chain([&self.embed_dim]).any(|&w| w == 0 || w % self.norm_groups.max(1) != 0) {
            out.push(format!("backbone.widths: every width must be a positive multiple of norm_groups={}", self.norm_groups));
        }
        if self.norm_groups == 0 {
            out.push("backbone.norm_groups: must be >= 1".into());
        }
        if self.strides.iter().chain([&self.final_stride]).any(|&s| s == 0) {
            out.push("backbone.strides: strides must be >= 1".into());
        }
        out
    }

    /// `(in_channels, out_channels, stride)` of every stage.
    pub fn stages(&self) -> Vec<(usize, usize, usize)> {
        let mut prev = 3;
        let mut out = Vec::new();
        for (&w, &s) in self.widths.iter().zip(&self.strides).chain([(&self.embed_dim, &self.final_stride)]) {
            out.push((prev, w, s));
            prev = w;
        }
        out
    }

    /// Spatial size of the feature map for an input of `(h, w)`.
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        self.stages()
            .iter()
            .fold((h, w), |(h, w), &(_, _, s)| ((h + 2 - 3) / s + 1, (w + 2 - 3) / s + 1))
    }
}

/// A `C x H x W` feature map of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * height * width);
        FeatureMap {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Splits the rows into `parts` horizontal stripes (see [`part_bounds`]).
    pub fn part_split(&self, parts: usize) -> Result<Vec<FeatureMap>> {
        let bounds = part_bounds(self.height, parts)?;
        Ok(bounds
            .into_iter()
            .map(|(s, e)| {
                let mut data = Vec::with_capacity(self.channels * (e - s) * self.width);
                for c in 0..self.channels {
                    let base = c * self.height * self.width;
                    data.extend_from_slice(&self.data[base + s * self.width..base + e * self.width]);
                }
                FeatureMap::new(self.channels, e - s, self.width, data)
            })
            .collect())
    }

    /// Stacks maps along the height axis.
    pub fn concat_rows(parts: &[FeatureMap]) -> FeatureMap {
        let c = parts[0].channels;
        let w = parts[0].width;
        let h: usize = parts.iter().map(|p| p.height).sum();
        let mut data = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for p in parts {
                assert_eq!((p.channels, p.width), (c, w));
                data.extend_from_slice(&p.data[ch * p.height * w..(ch + 1) * p.height * w]);
            }
        }
        FeatureMap::new(c, h, w, data)
    }

    /// Global pooling to a `C`-vector.
    pub fn pool(&self, kind: Pooling) -> Vec<f64> {
        self.data
            .chunks(self.height * self.width)
            .map(|ch| match kind {
                Pooling::Avg => ch.iter().sum::<f64>() / ch.len() as f64,
                Pooling::Max => ch.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            })
            .collect()
    }

    pub fn to_tensor(maps: &[FeatureMap]) -> Tensor {
        let (c, h, w) = (maps[0].channels, maps[0].height, maps[0].width);
        let mut data = Vec::with_capacity(maps.len() * c * h * w);
        for m in maps {
            data.extend_from_slice(&m.data);
        }
        Tensor::from_vec(vec![maps.len(), c, h, w], data)
    }

    pub fn from_tensor(t: &Tensor) -> Vec<FeatureMap> {
        let (n, c, h, w) = t.dims4();
        t.data().chunks(c * h * w).take(n).map(|d| FeatureMap::new(c, h, w, d.to_vec())).collect()
    }
}

/// Row ranges of `parts` horizontal stripes over `height` rows.
///
/// Every stripe gets `height / parts` rows; the `height % parts` leftover rows
/// go one each to the last stripes, so heights differ by at most one and
/// `H=5, P=2` splits as `(2, 3)`.
pub fn part_bounds(height: usize, parts: usize) -> Result<Vec<(usize, usize)>> {
    if parts == 0 || parts > height {
        return Err(Error::config("far.parts", format!("cannot split {height} rows into {parts} parts")));
    }
    let base = height / parts;
    let extra = height % parts;
    let mut start = 0;
    Ok((0..parts)
        .map(|i| {
            let len = base + usize::from(i >= parts - extra);
            let r = (start, start + len);
            start += len;
            r
        })
        .collect())
}

/// A pooled feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub normalized: bool,
}

impl Embedding {
    pub fn normalized(mut self) -> Self {
        l2_normalize(&mut self.vector);
        self.normalized = true;
        self
    }
}

pub fn l2_normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
}

/// Feature map and pooled embedding of a batch, as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct Features {
    pub map: Var,
    pub embedding: Var,
}

/// Backbone plus identity classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ReidModel {
    pub config: BackboneConfig,
    pub num_classes: usize,
    pub params: ParamSet,
}

pub const ID_CLASSIFIER: &str = "id_classifier.weight";

impl ReidModel {
    /// Randomly initialized model: He-normal convolutions, unit group-norm
    /// scale, zero shift, and a small-normal identity classifier.
    pub fn new(config: BackboneConfig, num_classes: usize, seed: u64) -> Result<Self> {
        let problems = config.problems();
        if !problems.is_empty() {
            return Err(Error::ConfigList(problems));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::default();
        for (i, (cin, cout, _)) in config.stages().into_iter().enumerate() {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("valid std");
            let w = (0..cout * cin * 9).map(|_| normal.sample(&mut rng)).collect();
            params.insert(format!("stage{i}.conv.weight"), Tensor::from_vec(vec![cout, cin, 3, 3], w));
            if i + 1 == config.stages().len() && config.linear_head {
                params.insert(format!("stage{i}.conv.bias"), Tensor::zeros(vec![cout]));
            } else {
                params.insert(format!("stage{i}.norm.weight"), Tensor::full(vec![cout], 1.0));
                params.insert(format!("stage{i}.norm.bias"), Tensor::zeros(vec![cout]));
            }
        }
        let normal = Normal::new(0.0, 0.01).expect("valid std");
        let w = (0..num_classes * config.embed_dim).map(|_| normal.sample(&mut rng)).collect();
        params.insert(ID_CLASSIFIER.to_string(), Tensor::from_vec(vec![num_classes, config.embed_dim], w));
        Ok(ReidModel {
            config,
            num_classes,
            params,
        })
    }

    pub fn num_stages(&self) -> usize {
        self.config.widths.len() + 1
    }

    /// Backbone forward pass on `x` `(N, 3, H, W)`.
    pub fn features(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Features {
        let mut h = x;
        let stages = self.config.stages();
        let last = stages.len() - 1;
        for (i, (_, _, stride)) in stages.into_iter().enumerate() {
            let w = p.var(&format!("stage{i}.conv.weight"));
            if i == last && self.config.linear_head {
                let b = p.var(&format!("stage{i}.conv.bias"));
                h = g.conv2d(h, w, Some(b), stride, 1);
                continue;
            }
            let (gamma, beta) = (p.var(&format!("stage{i}.norm.weight")), p.var(&format!("stage{i}.norm.bias")));
            h = g.conv2d(h, w, None, stride, 1);
            h = g.group_norm(h, gamma, beta, self.config.norm_groups, NORM_EPS);
            h = g.relu(h);
        }
        let embedding = g.global_pool(h, self.config.pooling);
        Features { map: h, embedding }
    }

    /// Identity logits for pooled embeddings `(N, C)`.
    pub fn id_logits(&self, g: &mut Graph, p: &BoundParams, embedding: Var) -> Var {
        let w = p.var(ID_CLASSIFIER);
        g.matmul_nt(embedding, w)
    }

    /// Gradient-free forward pass over `images`, in chunks of 64.
    pub fn forward(&self, images: &[&Image]) -> Result<(Vec<FeatureMap>, Vec<Embedding>)> {
        if images.is_empty() {
            return Err(Error::Empty("forward: empty batch".into()));
        }
        for (i, img) in images.iter().enumerate() {
            if !img.data.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("input image {i}")));
            }
        }
        let mut maps = Vec::with_capacity(images.len());
        let mut embs = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let mut g = Graph::new();
            let bound = self.params.bind_constant(&mut g);
            let x = g.constant(images_to_tensor(chunk));
            let f = self.features(&mut g, &bound, x);
            maps.extend(FeatureMap::from_tensor(g.value(f.map)));
            let e = g.value(f.embedding);
            for i in 0..chunk.len() {
                embs.push(Embedding {
                    vector: e.row(i).to_vec(),
                    normalized: false,
                });
            }
        }
        Ok((maps, embs))
    }

    /// Pooled embeddings only.
    pub fn embed(&self, images: &[&Image]) -> Result<Vec<Embedding>> {
        Ok(self.forward(images)?.1)
    }
}

/// Stacks images into an `(N, 3, H, W)` tensor.
pub fn images_to_tensor(images: &[&Image]) -> Tensor {
    let (h, w) = (images[0].height, images[0].width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        assert_eq!((img.height, img.width), (h, w), "images in a batch must share a size");
        data.extend(img.to_chw());
    }
    Tensor::from_vec(vec![images.len(), 3, h, w], data)
}
