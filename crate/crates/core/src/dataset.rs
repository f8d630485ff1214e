//! Labeled image datasets: synthesis, the on-disk format, relabeling and
//! clean/protected mixtures.
//!
//! On disk a dataset is a directory holding `manifest.json` plus one 8-bit
//! RGB PNG per sample under `images/`. Pixels are quantized with
//! `byte = round(pixel * 255)` and restored with `pixel = byte / 255`.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

/// An `H x W x 3` image with values in `[0, 1]`, stored row-major (HWC).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(
            data.len() == height * width * Self::CHANNELS,
            Parameter,
            "image buffer of {} values does not match {height}x{width}x3",
            data.len()
        );
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * Self::CHANNELS],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * Self::CHANNELS + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * Self::CHANNELS + c] = v;
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Channel-planar copy (CHW) for network input.
    pub fn to_chw(&self) -> Vec<f32> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; hw * Self::CHANNELS];
        for (p, px) in self.data.chunks_exact(Self::CHANNELS).enumerate() {
            for c in 0..Self::CHANNELS {
                out[c * hw + p] = px[c];
            }
        }
        out
    }

    pub fn from_chw(height: usize, width: usize, chw: &[f32]) -> Self {
        let hw = height * width;
        let mut data = vec![0.0; hw * Self::CHANNELS];
        for p in 0..hw {
            for c in 0..Self::CHANNELS {
                data[p * Self::CHANNELS + c] = chw[c * hw + p];
            }
        }
        Self { height, width, data }
    }

    /// Round-trip through 8-bit storage.
    pub fn quantized(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| dequantize(quantize(v))).collect(),
        }
    }
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(b: u8) -> f32 {
    b as f32 / 255.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub label: usize,
    pub pixels: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageDataset {
    pub name: String,
    pub num_categories: usize,
    pub seed: u64,
    pub samples: Vec<ImageSample>,
}

impl LabeledImageDataset {
    pub fn new(name: impl Into<String>, num_categories: usize, seed: u64, samples: Vec<ImageSample>) -> Result<Self> {
        let ds = Self {
            name: name.into(),
            num_categories,
            seed,
            samples,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Check every dataset and sample invariant.
    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_categories >= 1, Format, "num_categories must be at least 1");
        let mut seen = HashSet::with_capacity(self.samples.len());
        let shape = self.samples.first().map(|s| (s.pixels.height, s.pixels.width));
        for s in &self.samples {
            ensure!(seen.insert(s.id.as_str()), Format, "duplicate sample id {}", s.id);
            ensure!(
                s.label < self.num_categories,
                Format,
                "sample {} has label {} but the dataset declares {} categories",
                s.id,
                s.label,
                self.num_categories
            );
            ensure!(s.pixels.in_unit_range(), Format, "sample {} has pixels outside [0,1]", s.id);
            ensure!(
                Some((s.pixels.height, s.pixels.width)) == shape,
                Format,
                "sample {} has a different image size",
                s.id
            );
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }

    /// `(height, width)` of every image, or `None` when empty.
    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| (s.pixels.height, s.pixels.width))
    }

    /// NCHW batch of the selected samples.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let (h, w) = self.image_size().expect("batch of an empty dataset");
        let mut data = Vec::with_capacity(indices.len() * h * w * 3);
        for &i in indices {
            data.extend(self.samples[i].pixels.to_chw());
        }
        Tensor::from_vec([indices.len(), 3, h, w], data)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Samples whose label is in `keep`, with their original labels.
    pub fn filter_labels(&self, keep: &BTreeSet<usize>) -> Self {
        Self {
            name: self.name.clone(),
            num_categories: self.num_categories,
            seed: self.seed,
            samples: self.samples.iter().filter(|s| keep.contains(&s.label)).cloned().collect(),
        }
    }
}

/// Parameters of the synthetic pattern dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_categories: usize,
    pub per_category: usize,
    pub test_per_category: usize,
    pub side: usize,
    pub seed: u64,
}

impl SynthConfig {
    /// Test split of one fifth the training size (at least one per category).
    pub fn new(num_categories: usize, per_category: usize, side: usize, seed: u64) -> Self {
        Self {
            num_categories,
            per_category,
            test_per_category: (per_category / 5).max(1),
            side,
            seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthSplit {
    pub train: LabeledImageDataset,
    pub test: LabeledImageDataset,
}

#[derive(Clone, Copy, Debug)]
enum Primitive {
    Disk,
    Square,
    Triangle,
    Cross,
    Ring,
    HBars,
    VBars,
    Diamond,
}

const PRIMITIVES: [Primitive; 8] = [
    Primitive::Disk,
    Primitive::Square,
    Primitive::Triangle,
    Primitive::Cross,
    Primitive::Ring,
    Primitive::HBars,
    Primitive::VBars,
    Primitive::Diamond,
];

impl Primitive {
    /// Whether the normalized offset `(u, v)` (radius 1) lies inside the shape.
    fn contains(self, u: f32, v: f32) -> bool {
        match self {
            Primitive::Disk => u * u + v * v <= 1.0,
            Primitive::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
            Primitive::Triangle => (-1.0..=0.8).contains(&v) && u.abs() <= (v + 1.0) * 0.55,
            Primitive::Cross => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
            Primitive::Ring => {
                let r = u * u + v * v;
                (0.4..=1.0).contains(&r)
            }
            Primitive::HBars => u.abs() <= 1.0 && v.abs() <= 1.0 && ((v + 1.0) * 2.5).floor() as i32 % 2 == 0,
            Primitive::VBars => u.abs() <= 1.0 && v.abs() <= 1.0 && ((u + 1.0) * 2.5).floor() as i32 % 2 == 0,
            Primitive::Diamond => u.abs() + v.abs() <= 1.0,
        }
    }
}

/// Per-category pattern parameters shared by the train and test splits.
#[derive(Clone, Debug)]
struct CategoryPattern {
    background: [f32; 3],
    foreground: [f32; 3],
    primitive: Primitive,
    scale: f32,
}

// Visual statistics of the synthetic task.
const COLOR_AMPLITUDE: f32 = 0.12;
const SHAPE_CONTRAST: f32 = 0.22;
const TEXTURE_STD: f32 = 0.07;
const BRIGHTNESS_STD: f32 = 0.04;
const JITTER_FRACTION: f32 = 0.18;

fn category_pattern(c: usize, m: usize) -> CategoryPattern {
    use std::f32::consts::PI;
    let hue = 2.0 * PI * c as f32 / m as f32;
    let background = [
        0.5 + COLOR_AMPLITUDE * hue.cos(),
        0.5 + COLOR_AMPLITUDE * (hue - 2.0 * PI / 3.0).cos(),
        0.5 + COLOR_AMPLITUDE * (hue + 2.0 * PI / 3.0).cos(),
    ];
    let sign = if (c / PRIMITIVES.len()) % 2 == 0 { 1.0 } else { -1.0 };
    let weights = [[1.0, 0.7, 0.4], [0.4, 1.0, 0.7], [0.7, 0.4, 1.0]][c % 3];
    let foreground = [0, 1, 2].map(|i| background[i] + sign * SHAPE_CONTRAST * weights[i]);
    CategoryPattern {
        background,
        foreground,
        primitive: PRIMITIVES[c % PRIMITIVES.len()],
        scale: if (c / PRIMITIVES.len()) % 2 == 0 { 0.3 } else { 0.22 },
    }
}

fn render_sample(pattern: &CategoryPattern, side: usize, rng: &mut ChaCha8Rng, texture: &Normal<f32>, bright: &Normal<f32>) -> Image {
    let s = side as f32;
    let jitter = JITTER_FRACTION * s;
    let cx = s / 2.0 + rng.gen_range(-jitter..=jitter);
    let cy = s / 2.0 + rng.gen_range(-jitter..=jitter);
    let radius = pattern.scale * s * rng.gen_range(0.85..=1.15);
    let shift = bright.sample(rng);
    let mut img = Image::filled(side, side, 0.0);
    for y in 0..side {
        for x in 0..side {
            let u = (x as f32 + 0.5 - cx) / radius;
            let v = (y as f32 + 0.5 - cy) / radius;
            let base = if pattern.primitive.contains(u, v) {
                &pattern.foreground
            } else {
                &pattern.background
            };
            for c in 0..3 {
                let val = base[c] + shift + texture.sample(rng);
                img.set(y, x, c, val.clamp(0.0, 1.0));
            }
        }
    }
    img
}

/// Synthesize a pattern-classification dataset: each category is a base
/// color plus a geometric primitive with seeded jitter and Gaussian
/// texture. Train and test draw from independent noise streams.
pub fn synth_blobs(config: &SynthConfig) -> Result<SynthSplit> {
    let SynthConfig {
        num_categories: m,
        per_category,
        test_per_category,
        side,
        seed,
    } = *config;
    ensure!(m >= 2, Parameter, "num_categories must be at least 2, got {m}");
    ensure!(per_category >= 1, Parameter, "per_category must be at least 1");
    ensure!(test_per_category >= 1, Parameter, "test_per_category must be at least 1");
    ensure!(side >= 8, Parameter, "side must be at least 8, got {side}");

    let patterns: Vec<_> = (0..m).map(|c| category_pattern(c, m)).collect();
    let texture = Normal::new(0.0, TEXTURE_STD).unwrap();
    let bright = Normal::new(0.0, BRIGHTNESS_STD).unwrap();
    let name = format!("synth_blobs-m{m}-n{per_category}-s{side}-seed{seed}");

    let make = |split: &str, count: usize, stream: u64| -> Result<LabeledImageDataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut samples = Vec::with_capacity(m * count);
        // Interleave categories so manifest order is not sorted by label.
        for _ in 0..count {
            for (c, pattern) in patterns.iter().enumerate() {
                samples.push(ImageSample {
                    id: format!("{split}-{:06}", samples.len()),
                    label: c,
                    pixels: render_sample(pattern, side, &mut rng, &texture, &bright),
                });
            }
        }
        LabeledImageDataset::new(format!("{name}/{split}"), m, seed, samples)
    };

    Ok(SynthSplit {
        train: make("train", per_category, 1)?,
        test: make("test", test_per_category, 2)?,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    name: String,
    num_categories: usize,
    seed: u64,
    samples: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    file: String,
    label: usize,
}

fn encode_png(path: &Path, img: &Image) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    let mut writer = enc.write_header().map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    writer.finish().map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn decode_png(path: &Path, id: &str) -> Result<Image> {
    let file = fs::File::open(path).map_err(|e| Error::Format(format!("sample {id}: cannot open {}: {e}", path.display())))?;
    let decoder = png::Decoder::new(file);
    let mut reader = decoder.read_info().map_err(|e| Error::Format(format!("sample {id}: {e}")))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("sample {id}: {e}")))?;
    ensure!(
        info.color_type == png::ColorType::Rgb && info.bit_depth == png::BitDepth::Eight,
        Format,
        "sample {id}: expected 8-bit RGB, found {:?}/{:?}",
        info.color_type,
        info.bit_depth
    );
    let (w, h) = (info.width as usize, info.height as usize);
    let data = buf[..w * h * 3].iter().map(|&b| dequantize(b)).collect();
    Image::new(h, w, data)
}

/// Write `ds` to a new directory `path`. The directory is assembled next to
/// the target and renamed into place.
pub fn save_dataset(ds: &LabeledImageDataset, path: &Path) -> Result<()> {
    ds.validate()?;
    crate::io::write_dir_atomic(path, |dir| {
        let images = dir.join("images");
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        let mut entries = Vec::with_capacity(ds.len());
        for s in &ds.samples {
            let file = format!("images/{}.png", s.id);
            encode_png(&dir.join(&file), &s.pixels)?;
            entries.push(ManifestEntry {
                id: s.id.clone(),
                file,
                label: s.label,
            });
        }
        let manifest = Manifest {
            name: ds.name.clone(),
            num_categories: ds.num_categories,
            seed: ds.seed,
            samples: entries,
        };
        crate::io::write_json(&dir.join("manifest.json"), &manifest)
    })
}

pub fn load_dataset(path: &Path) -> Result<LabeledImageDataset> {
    let manifest_path = path.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::Format(format!("cannot read {}: {e}", manifest_path.display())))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("corrupt manifest {}: {e}", manifest_path.display())))?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in manifest.samples {
        ensure!(
            entry.label < manifest.num_categories,
            Format,
            "sample {} has label {} but the manifest declares {} categories",
            entry.id,
            entry.label,
            manifest.num_categories
        );
        let pixels = decode_png(&path.join(&entry.file), &entry.id)?;
        samples.push(ImageSample {
            id: entry.id,
            label: entry.label,
            pixels,
        });
    }
    LabeledImageDataset::new(manifest.name, manifest.num_categories, manifest.seed, samples)
}

/// A relabeling of `m` source categories onto `n` target categories.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMapping {
    pub source_categories: usize,
    pub target_categories: usize,
    pub table: Vec<usize>,
}

impl LabelMapping {
    pub fn identity(m: usize) -> Self {
        Self {
            source_categories: m,
            target_categories: m,
            table: (0..m).collect(),
        }
    }

    /// Every source category must map into range, and every target group must be hit.
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.table.len() == self.source_categories,
            Parameter,
            "mapping table has {} entries for {} source categories",
            self.table.len(),
            self.source_categories
        );
        let mut hit = vec![false; self.target_categories];
        for &t in &self.table {
            ensure!(t < self.target_categories, Parameter, "mapping target {t} out of range");
            hit[t] = true;
        }
        if let Some(missing) = hit.iter().position(|h| !h) {
            return Err(Error::Parameter(format!("mapping is not surjective: target {missing} unused")));
        }
        Ok(())
    }

    /// Number of source labels mapped onto each target label.
    pub fn group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.target_categories];
        for &t in &self.table {
            sizes[t] += 1;
        }
        sizes
    }
}

/// Seeded balanced grouping of `m` labels into `n` groups.
pub fn make_grouping(m: usize, n: usize, seed: u64) -> Result<LabelMapping> {
    ensure!(n >= 1, Parameter, "target category count must be at least 1");
    ensure!(n <= m, Parameter, "cannot group {m} categories into {n} > {m} groups");
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut table = vec![0; m];
    for (pos, &label) in order.iter().enumerate() {
        table[label] = pos % n;
    }
    Ok(LabelMapping {
        source_categories: m,
        target_categories: n,
        table,
    })
}

pub fn relabel(ds: &LabeledImageDataset, mapping: &LabelMapping) -> Result<LabeledImageDataset> {
    ensure!(
        mapping.source_categories == ds.num_categories,
        Parameter,
        "mapping expects {} source categories, dataset has {}",
        mapping.source_categories,
        ds.num_categories
    );
    mapping.validate()?;
    Ok(LabeledImageDataset {
        name: format!("{}@relabel{}", ds.name, mapping.target_categories),
        num_categories: mapping.target_categories,
        seed: ds.seed,
        samples: ds
            .samples
            .iter()
            .map(|s| ImageSample {
                id: s.id.clone(),
                label: mapping.table[s.label],
                pixels: s.pixels.clone(),
            })
            .collect(),
    })
}

/// Take samples of `clean_categories` from `clean` and all others from
/// `protected`.
pub fn mix_datasets(
    clean: &LabeledImageDataset,
    protected: &LabeledImageDataset,
    clean_categories: &BTreeSet<usize>,
) -> Result<LabeledImageDataset> {
    ensure!(
        clean.num_categories == protected.num_categories && clean.len() == protected.len(),
        Parameter,
        "clean and protected datasets differ in size or category count"
    );
    let mut samples = Vec::with_capacity(clean.len());
    for (c, p) in clean.samples.iter().zip(&protected.samples) {
        ensure!(
            c.id == p.id && c.label == p.label,
            Parameter,
            "sample mismatch: clean {}/{} vs protected {}/{}",
            c.id,
            c.label,
            p.id,
            p.label
        );
        samples.push(if clean_categories.contains(&c.label) {
            c.clone()
        } else {
            p.clone()
        });
    }
    Ok(LabeledImageDataset {
        name: format!("{}+clean{}", protected.name, clean_categories.len()),
        num_categories: clean.num_categories,
        seed: protected.seed,
        samples,
    })
}
