//! Additive noise sets and their binary container.
//!
//! Layout (little-endian): `"UCPX" | version u16 | [mode tag, 4 bytes] |
//! count u32 | H u32 | W u32 | C u32 | eps f32 | count * H*W*C f32 | JSON`.
//! Cluster-wise sets omit the mode tag; sample-wise and class-wise sets
//! carry `"SAMP"` or `"CLSW"`. Each delta is stored row-major in H×W×C
//! order, the same layout as [`Image`].

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Image, ImageSample, LabeledImageDataset};
use crate::error::{ensure, Error, Result};

const MAGIC: &[u8; 4] = b"UCPX";
const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// One delta per cluster (the cluster-wise method).
    Cluster,
    SampleWise,
    ClassWise,
}

impl NoiseMode {
    fn tag(self) -> Option<&'static [u8; 4]> {
        match self {
            NoiseMode::Cluster => None,
            NoiseMode::SampleWise => Some(b"SAMP"),
            NoiseMode::ClassWise => Some(b"CLSW"),
        }
    }
}

/// Loss recorded while optimizing one cluster's generator.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    /// Mean loss over the cluster under the freshly initialized generator.
    pub initial: f64,
    /// Mean mini-batch loss for every epoch.
    pub epochs: Vec<f64>,
    /// Mean loss over the cluster under the final, stored delta.
    pub last: f64,
}

/// Everything besides the raw tensors; serialized as the JSON trailer.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trailer {
    /// Sample id to delta index.
    pub assignment: BTreeMap<String, usize>,
    /// Cluster centers in embedding space, used to place unseen images.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub centers: Vec<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub permutation: Vec<usize>,
    /// Descriptor of the encoder the centers live in.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder: Option<String>,
    #[serde(default)]
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loss_traces: Vec<LossTrace>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationSet {
    pub mode: NoiseMode,
    pub eps: f32,
    pub height: usize,
    pub width: usize,
    /// One H×W×3 tensor per noise unit, as set by `mode`.
    pub deltas: Vec<Image>,
    pub trailer: Trailer,
}

impl PerturbationSet {
    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    /// Largest absolute entry over all deltas.
    pub fn max_abs(&self) -> f32 {
        self.deltas.iter().flat_map(|d| d.data().iter()).fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.eps >= 0.0 && self.eps < 1.0, Parameter, "eps {} outside [0, 1)", self.eps);
        for (i, d) in self.deltas.iter().enumerate() {
            ensure!(
                d.height() == self.height && d.width() == self.width,
                Format,
                "delta {i} is {}x{}, expected {}x{}",
                d.height(),
                d.width(),
                self.height,
                self.width
            );
            ensure!(d.data().iter().all(|v| v.is_finite()), Numeric, "delta {i} has non-finite entries");
            ensure!(
                d.data().iter().all(|v| v.abs() <= self.eps),
                Numeric,
                "delta {i} exceeds the budget"
            );
        }
        let n = self.deltas.len();
        ensure!(
            self.trailer.assignment.values().all(|&a| a < n),
            Format,
            "assignment refers to a delta beyond {n}"
        );
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let item = self.height * self.width * Image::CHANNELS;
        let mut out = Vec::with_capacity(32 + self.deltas.len() * item * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        if let Some(tag) = self.mode.tag() {
            out.extend_from_slice(tag);
        }
        for v in [self.deltas.len(), self.height, self.width, Image::CHANNELS] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.eps.to_le_bytes());
        for d in &self.deltas {
            for v in d.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&serde_json::to_vec(&self.trailer)?);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            ensure!(pos + n <= bytes.len(), Format, "truncated perturbation file");
            let s = &bytes[pos..pos + n];
            pos += n;
            Ok(s)
        };
        ensure!(take(4)? == MAGIC, Format, "not a UCPX perturbation file");
        let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
        ensure!(version == VERSION, Format, "unsupported perturbation version {version}");
        let word = take(4)?;
        let (mode, count) = match word {
            b"SAMP" => (NoiseMode::SampleWise, None),
            b"CLSW" => (NoiseMode::ClassWise, None),
            w => (NoiseMode::Cluster, Some(u32::from_le_bytes(w.try_into().unwrap()))),
        };
        let mut u32_field = || -> Result<usize> { Ok(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize) };
        let count = match count {
            Some(c) => c as usize,
            None => u32_field()?,
        };
        let (height, width, channels) = (u32_field()?, u32_field()?, u32_field()?);
        ensure!(channels == Image::CHANNELS, Format, "expected 3 channels, found {channels}");
        let eps = f32::from_le_bytes(take(4)?.try_into().unwrap());
        let item = height * width * channels;
        let total = count
            .checked_mul(item)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format("perturbation header sizes overflow".into()))?;
        let raw = take(total)?;
        let mut deltas = Vec::with_capacity(count);
        for chunk in raw.chunks_exact(item * 4).take(count) {
            let data = chunk.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            deltas.push(Image::new(height, width, data)?);
        }
        let trailer: Trailer =
            serde_json::from_slice(&bytes[pos..]).map_err(|e| Error::Format(format!("corrupt perturbation trailer: {e}")))?;
        let set = Self {
            mode,
            eps,
            height,
            width,
            deltas,
            trailer,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_file_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// `x' = clamp(x + delta, 0, 1)`, element-wise.
pub fn perturb_image(x: &Image, delta: &Image) -> Image {
    let data = x.data().iter().zip(delta.data()).map(|(a, d)| (a + d).clamp(0.0, 1.0)).collect();
    Image::new(x.height(), x.width(), data).expect("shapes agree")
}

/// Add each sample's delta. Samples missing from the stored assignment are
/// resolved by `fallback`, which receives the unresolved samples as a
/// dataset and returns one delta index per sample.
pub fn apply_perturbations(
    ds: &LabeledImageDataset,
    set: &PerturbationSet,
    fallback: Option<&dyn Fn(&LabeledImageDataset) -> Result<Vec<usize>>>,
) -> Result<LabeledImageDataset> {
    if let Some((h, w)) = ds.image_size() {
        ensure!(
            (h, w) == (set.height, set.width),
            Parameter,
            "images are {h}x{w} but the perturbations are {}x{}",
            set.height,
            set.width
        );
    }
    let mut index: Vec<Option<usize>> = ds.samples.iter().map(|s| set.trailer.assignment.get(&s.id).copied()).collect();
    let missing: Vec<usize> = (0..ds.len()).filter(|&i| index[i].is_none()).collect();
    if !missing.is_empty() {
        let Some(fallback) = fallback else {
            return Err(Error::Parameter(format!(
                "sample {} has no stored perturbation and no assignment rule was given",
                ds.samples[missing[0]].id
            )));
        };
        let sub = LabeledImageDataset {
            name: ds.name.clone(),
            num_categories: ds.num_categories,
            seed: ds.seed,
            samples: missing.iter().map(|&i| ds.samples[i].clone()).collect(),
        };
        let resolved = fallback(&sub)?;
        ensure!(
            resolved.len() == missing.len(),
            Parameter,
            "assignment rule returned the wrong count"
        );
        for (&i, r) in missing.iter().zip(resolved) {
            ensure!(r < set.len(), Parameter, "assignment rule returned index {r} of {}", set.len());
            index[i] = Some(r);
        }
    }
    let samples = ds
        .samples
        .iter()
        .zip(index)
        .map(|(s, k)| ImageSample {
            id: s.id.clone(),
            label: s.label,
            pixels: perturb_image(&s.pixels, &set.deltas[k.unwrap()]),
        })
        .collect();
    Ok(LabeledImageDataset {
        name: format!("{}+noise", ds.name),
        num_categories: ds.num_categories,
        seed: ds.seed,
        samples,
    })
}
