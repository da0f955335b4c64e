//! On-disk dataset layout.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/images/<split>/<sample_id>.npy   (raw mode, little-endian f64, bit exact)
//! <dir>/images/<split>/<sample_id>.png   (png mode, 8-bit RGB)
//! ```

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Benchmark, DatasetManifest, GenerateParams, IdentitySpec, Image, SampleRecord, Split, Viewpoint};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    #[default]
    Raw,
    Png,
}

impl ImageFormat {
    fn extension(self) -> &'static str {
        match self {
            ImageFormat::Raw => "npy",
            ImageFormat::Png => "png",
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RecordEntry {
    sample_id: usize,
    identity_id: usize,
    clothing_id: usize,
    camera_id: usize,
    viewpoint: Viewpoint,
    occlusion: f64,
    image: String,
}

#[derive(Serialize, Deserialize)]
struct SplitEntry {
    split: Split,
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "N_p")]
    n_p: usize,
    seed: u64,
    records: Vec<RecordEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    format_version: u32,
    seed: u64,
    image_format: ImageFormat,
    params: GenerateParams,
    identities: Vec<IdentitySpec>,
    train: SplitEntry,
    query: SplitEntry,
    gallery: SplitEntry,
}

/// Writes `bench` under `dir`. Refuses to touch a directory that already
/// holds a manifest unless `force` is set.
pub fn save_benchmark(bench: &Benchmark, dir: &Path, format: ImageFormat, force: bool) -> Result<()> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if manifest_path.exists() && !force {
        return Err(Error::config(
            "out",
            format!("{} already contains a dataset; pass --force to overwrite", dir.display()),
        ));
    }
    let mut entries = Vec::new();
    for m in [&bench.train, &bench.query, &bench.gallery] {
        let sub = dir.join("images").join(m.split.name());
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let mut records = Vec::with_capacity(m.records.len());
        for r in &m.records {
            let rel = format!("images/{}/{:06}.{}", m.split.name(), r.sample_id, format.extension());
            let path = dir.join(&rel);
            match format {
                ImageFormat::Raw => write_npy(&path, &r.image)?,
                ImageFormat::Png => write_png(&path, &r.image)?,
            }
            records.push(RecordEntry {
                sample_id: r.sample_id,
                identity_id: r.identity_id,
                clothing_id: r.clothing_id,
                camera_id: r.camera_id,
                viewpoint: r.viewpoint,
                occlusion: r.occlusion,
                image: rel,
            });
        }
        entries.push(SplitEntry {
            split: m.split,
            n: m.len(),
            n_p: m.num_identities(),
            seed: m.seed,
            records,
        });
    }
    let mut it = entries.into_iter();
    let file = ManifestFile {
        format_version: FORMAT_VERSION,
        seed: bench.params.seed,
        image_format: format,
        params: bench.params.clone(),
        identities: bench.identities.clone(),
        train: it.next().expect("train split"),
        query: it.next().expect("query split"),
        gallery: it.next().expect("gallery split"),
    };
    let json = serde_json::to_string_pretty(&file).expect("manifest serializes");
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))
}

pub fn load_benchmark(dir: &Path) -> Result<Benchmark> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let file: ManifestFile = serde_json::from_str(&text).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    if file.format_version != FORMAT_VERSION {
        return Err(Error::format(&manifest_path, format!("unsupported format_version {}", file.format_version)));
    }
    let load_split = |entry: SplitEntry| -> Result<DatasetManifest> {
        let mut records = Vec::with_capacity(entry.records.len());
        for r in entry.records {
            let path = dir.join(&r.image);
            let image = if r.image.ends_with(".png") { read_png(&path)? } else { read_npy(&path)? };
            records.push(SampleRecord {
                sample_id: r.sample_id,
                identity_id: r.identity_id,
                clothing_id: r.clothing_id,
                camera_id: r.camera_id,
                viewpoint: r.viewpoint,
                occlusion: r.occlusion,
                image,
            });
        }
        if records.len() != entry.n {
            return Err(Error::format(&manifest_path, format!("{:?} split declares N={} but lists {}", entry.split, entry.n, records.len())));
        }
        Ok(DatasetManifest {
            split: entry.split,
            seed: entry.seed,
            records,
        })
    };
    Ok(Benchmark {
        params: file.params,
        identities: file.identities,
        train: load_split(file.train)?,
        query: load_split(file.query)?,
        gallery: load_split(file.gallery)?,
    })
}

const NPY_MAGIC: &[u8] = b"\x93NUMPY";

/// Writes an `(H, W, 3)` little-endian `f64` array in NPY v1.0 format.
pub fn write_npy(path: &Path, img: &Image) -> Result<()> {
    let mut header = format!(
        "{{'descr': '<f8', 'fortran_order': False, 'shape': ({}, {}, 3), }}",
        img.height, img.width
    );
    // magic(6) + version(2) + len(2) + header + '\n' is padded to 64 bytes.
    let unpadded = 10 + header.len() + 1;
    header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    header.push('\n');
    let mut bytes = Vec::with_capacity(10 + header.len() + img.data.len() * 8);
    bytes.extend_from_slice(NPY_MAGIC);
    bytes.extend_from_slice(&[1, 0]);
    bytes.extend_from_slice(&(header.len() as u16).to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    for v in &img.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_npy(path: &Path) -> Result<Image> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |why: &str| Error::format(path, why.to_string());
    if bytes.len() < 10 || &bytes[..6] != NPY_MAGIC || bytes[6] != 1 {
        return Err(bad("not an NPY v1 file"));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let header = std::str::from_utf8(bytes.get(10..10 + header_len).ok_or_else(|| bad("truncated header"))?)
        .map_err(|_| bad("header is not utf-8"))?;
    if !header.contains("'descr': '<f8'") || !header.contains("'fortran_order': False") {
        return Err(bad("only C-ordered little-endian f64 arrays are supported"));
    }
    let shape_str = header
        .split("'shape': (")
        .nth(1)
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| bad("missing shape"))?;
    let dims: Vec<usize> = shape_str
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| bad("bad shape entry")))
        .collect::<Result<_>>()?;
    if dims.len() != 3 || dims[2] != 3 {
        return Err(bad("expected shape (H, W, 3)"));
    }
    let body = &bytes[10 + header_len..];
    if body.len() != dims[0] * dims[1] * 3 * 8 {
        return Err(bad("payload size does not match shape"));
    }
    let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok(Image::new(dims[0], dims[1], data))
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let mut writer = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
    writer.write_image_data(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
    writer.finish().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<Image> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::format(path, "image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(path, "expected 8-bit RGB"));
    }
    let data = buf[..info.buffer_size()].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Image::new(info.height as usize, info.width as usize, data))
}

/// Path of the manifest inside a dataset directory.
pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}

/// Writes `bytes` to `path`, creating parent directories.
pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}
