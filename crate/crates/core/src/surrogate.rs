//! Frozen feature extractors: the toy convolutional surrogate, embedding
//! extraction, and the `UCWT` weights file.
//!
//! A weights file is laid out as
//!
//! ```text
//! "UCWT" | version u16 | arch_len u32 | arch utf8 | embed_dim u32 | flags u8
//!        | blocks u32 | { name_len u32 | name | len u32 | f32 x len }*
//! ```
//!
//! with all integers and floats little-endian. Bit 0 of `flags` requests
//! unit-normalized embeddings.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::LabeledImageDataset;
use crate::error::{ensure, Error, Result};
use crate::model::{ConvNet, ConvNetConfig};
use crate::nn::{Layer, Sequential};
use crate::tensor::Tensor;
use crate::train::{self, EpochStats, TrainerConfig};

/// Per-sample feature rows aligned with dataset order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMatrix {
    ids: Vec<String>,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<String>, dim: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(dim >= 1, Parameter, "embedding dimension must be positive");
        ensure!(
            data.len() == ids.len() * dim,
            Parameter,
            "{} values cannot form {} rows of width {dim}",
            data.len(),
            ids.len()
        );
        for (i, row) in data.chunks(dim).enumerate() {
            ensure!(
                row.iter().all(|v| v.is_finite()),
                Numeric,
                "non-finite embedding for sample {}",
                ids[i]
            );
        }
        Ok(Self { ids, dim, data })
    }

    /// Rows without ids (ids are their indices).
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(1, |r| r.len());
        ensure!(rows.iter().all(|r| r.len() == dim), Parameter, "ragged embedding rows");
        let ids = (0..rows.len()).map(|i| i.to_string()).collect();
        Self::new(ids, dim, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks(self.dim)
    }

    /// Rows selected by index, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            dim: self.dim,
            data,
        }
    }
}

/// A frozen image encoder `f_s`. Inputs are NCHW batches in `[0, 1]`;
/// outputs are `(n, embed_dim)`.
pub trait FeatureExtractor: Send + Sync {
    fn embed_dim(&self) -> usize;

    /// Architecture plus a hash of the weights.
    fn descriptor(&self) -> String;

    /// Whether [`FeatureExtractor::embed_with_input_grad`] is supported.
    fn differentiable(&self) -> bool;

    fn embed(&self, x: &Tensor) -> Tensor;

    /// Embed `x`, ask `upstream` for the loss gradient w.r.t. the
    /// embeddings, and return `(embeddings, gradient w.r.t. x)`.
    fn embed_with_input_grad(&self, x: &Tensor, upstream: &mut dyn FnMut(&Tensor) -> Result<Tensor>) -> Result<(Tensor, Tensor)>;
}

/// Convolutional classifier whose penultimate activations serve as features.
#[derive(Clone, Debug, PartialEq)]
pub struct Surrogate {
    pub net: ConvNet,
    /// Scale embeddings to unit length (image-text encoder style).
    pub normalize: bool,
    encoder: Sequential,
}

impl Surrogate {
    pub fn new(net: ConvNet, normalize: bool) -> Self {
        let mut encoder = net.features.clone();
        if normalize {
            encoder.layers.push(Layer::L2Normalize);
        }
        Self { net, normalize, encoder }
    }

    pub fn with_normalize(self, normalize: bool) -> Self {
        Self::new(self.net, normalize)
    }

    pub fn num_classes(&self) -> usize {
        self.net.config.num_classes
    }

    pub fn weights_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.net.named_params() {
            h.update(name.as_bytes());
            for v in p {
                h.update(v.to_le_bytes());
            }
        }
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl FeatureExtractor for Surrogate {
    fn embed_dim(&self) -> usize {
        self.net.config.embed_dim
    }

    fn descriptor(&self) -> String {
        let norm = if self.normalize { "+l2" } else { "" };
        format!("{}{norm}@{}", self.net.config.arch_string(), self.weights_hash())
    }

    fn differentiable(&self) -> bool {
        true
    }

    fn embed(&self, x: &Tensor) -> Tensor {
        self.encoder.forward(x)
    }

    fn embed_with_input_grad(&self, x: &Tensor, upstream: &mut dyn FnMut(&Tensor) -> Result<Tensor>) -> Result<(Tensor, Tensor)> {
        let (emb, tape) = self.encoder.forward_tape(x);
        let grad = upstream(&emb)?;
        ensure!(grad.shape() == emb.shape(), Parameter, "embedding gradient has the wrong shape");
        let dx = self.encoder.backward(tape, grad, None, true).expect("input gradient requested");
        Ok((emb, dx))
    }
}

/// Surrogate training defaults: no augmentation.
pub fn surrogate_trainer_config(seed: u64) -> TrainerConfig {
    TrainerConfig {
        seed,
        epochs: 4,
        ..TrainerConfig::default().without_augmentation()
    }
}

/// Train the desk-scale convolutional surrogate on `ds`.
pub fn train_toy_surrogate(ds: &LabeledImageDataset, config: &TrainerConfig) -> Result<(Surrogate, Vec<EpochStats>)> {
    let (net, history) = train::train_classifier(ds, config)?;
    Ok((Surrogate::new(net, false), history))
}

/// Argmax of the classification head for every sample.
pub fn predict_labels(surrogate: &Surrogate, ds: &LabeledImageDataset) -> Result<Vec<usize>> {
    if let Some((h, w)) = ds.image_size() {
        ensure!(h >= 1 && w >= 1, Parameter, "empty images");
    }
    let plain = TrainerConfig::default().without_augmentation();
    Ok(train::predict(&surrogate.net, ds, &plain))
}

pub fn extract_embeddings(extractor: &dyn FeatureExtractor, ds: &LabeledImageDataset, batch: usize) -> Result<EmbeddingMatrix> {
    ensure!(batch >= 1, Parameter, "batch must be at least 1");
    let d = extractor.embed_dim();
    let mut data = Vec::with_capacity(ds.len() * d);
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch) {
        let e = extractor.embed(&ds.batch(chunk));
        ensure!(
            e.item_len() == d && e.batch() == chunk.len(),
            Numeric,
            "extractor returned {:?}",
            e.shape()
        );
        data.extend_from_slice(e.data());
    }
    EmbeddingMatrix::new(ds.ids(), d, data)
}

const WEIGHTS_MAGIC: &[u8; 4] = b"UCWT";
const WEIGHTS_VERSION: u16 = 1;

pub fn encode_weights(s: &Surrogate) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    let arch = s.net.config.arch_string();
    out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
    out.extend_from_slice(arch.as_bytes());
    out.extend_from_slice(&(s.net.config.embed_dim as u32).to_le_bytes());
    out.push(u8::from(s.normalize));
    let params = s.net.named_params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(p.len() as u32).to_le_bytes());
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        ensure!(self.pos + n <= self.bytes.len(), Format, "truncated weights file");
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid utf8 in weights file".into()))
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<Surrogate> {
    let mut r = Reader { bytes, pos: 0 };
    ensure!(r.take(4)? == WEIGHTS_MAGIC, Format, "not a UCWT weights file");
    let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    ensure!(version == WEIGHTS_VERSION, Format, "unsupported weights version {version}");
    let arch = r.string()?;
    let config = ConvNetConfig::parse_arch(&arch).ok_or_else(|| Error::Config(format!("unknown architecture {arch:?}")))?;
    let embed_dim = r.u32()? as usize;
    ensure!(
        embed_dim == config.embed_dim,
        Format,
        "embed_dim {embed_dim} disagrees with architecture {arch}"
    );
    let normalize = r.take(1)?[0] & 1 == 1;
    let mut net = ConvNet::new(config, 0)?;
    let blocks = r.u32()? as usize;
    let expected: Vec<(String, usize)> = net.named_params().into_iter().map(|(n, p)| (n, p.len())).collect();
    ensure!(
        blocks == expected.len(),
        Format,
        "expected {} parameter blocks, found {blocks}",
        expected.len()
    );
    let mut values = Vec::with_capacity(blocks);
    for (want_name, want_len) in &expected {
        let name = r.string()?;
        ensure!(&name == want_name, Format, "expected parameter block {want_name}, found {name}");
        let len = r.u32()? as usize;
        ensure!(len == *want_len, Format, "block {name} has {len} values, expected {want_len}");
        let raw = r.take(len * 4)?;
        values.push(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect::<Vec<f32>>(),
        );
    }
    ensure!(r.pos == bytes.len(), Format, "trailing bytes in weights file");
    for (dst, src) in net.params_mut().into_iter().zip(values) {
        *dst = src;
    }
    Ok(Surrogate::new(net, normalize))
}

pub fn save_weights(s: &Surrogate, path: &Path) -> Result<()> {
    crate::io::write_file_atomic(path, &encode_weights(s))
}

/// Resolve a descriptor (a path to a `UCWT` file, optionally prefixed with
/// `ucwt:`) to a frozen encoder.
pub fn load_pretrained_encoder(descriptor: &str) -> Result<Surrogate> {
    let path = Path::new(descriptor.strip_prefix("ucwt:").unwrap_or(descriptor));
    if !path.is_file() {
        return Err(Error::Config(format!("unknown encoder descriptor {descriptor:?}")));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_blobs, SynthConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_surrogate(seed: u64) -> Surrogate {
        let net = ConvNet::new(
            ConvNetConfig {
                channels: vec![4, 8],
                embed_dim: 6,
                num_classes: 3,
            },
            seed,
        )
        .unwrap();
        Surrogate::new(net, false)
    }

    #[test]
    fn embeddings_have_one_row_per_sample_and_duplicates_match() {
        let mut ds = synth_blobs(&SynthConfig::new(3, 1, 8, 0)).unwrap().train;
        let s = small_surrogate(1);
        let e = extract_embeddings(&s, &ds, 2).unwrap();
        assert_eq!((e.rows(), e.dim()), (3, 6));
        let mut dup = ds.samples[0].clone();
        dup.id = "dup".into();
        ds.samples.push(dup);
        let e = extract_embeddings(&s, &ds, 3).unwrap();
        assert_eq!(e.row(0), e.row(3));
    }

    #[test]
    fn batch_size_does_not_change_embeddings() {
        let ds = synth_blobs(&SynthConfig::new(4, 5, 16, 2)).unwrap().train;
        let s = small_surrogate(2);
        let a = extract_embeddings(&s, &ds, 1).unwrap();
        let b = extract_embeddings(&s, &ds, 64).unwrap();
        let diff = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        assert!(diff <= 1e-5, "{diff}");
    }

    #[test]
    fn non_finite_embedding_names_the_sample() {
        let err = EmbeddingMatrix::new(vec!["a".into(), "b".into()], 1, vec![0.0, f32::NAN]).unwrap_err();
        assert!(matches!(&err, Error::Numeric(m) if m.contains('b')), "{err}");
    }

    #[test]
    fn weights_round_trip_and_descriptor() {
        let s = small_surrogate(3).with_normalize(true);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ucwt");
        save_weights(&s, &path).unwrap();
        let back = load_pretrained_encoder(path.to_str().unwrap()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.descriptor(), s.descriptor());
        let ds = synth_blobs(&SynthConfig::new(3, 2, 8, 0)).unwrap().train;
        assert_eq!(extract_embeddings(&back, &ds, 4).unwrap(), extract_embeddings(&s, &ds, 4).unwrap());
        let e = extract_embeddings(&back, &ds, 4).unwrap();
        for row in e.iter_rows() {
            let n: f32 = row.iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-5 || n == 0.0);
        }
    }

    #[test]
    fn unknown_descriptor_and_corrupt_files() {
        assert!(matches!(load_pretrained_encoder("clip-vit-b32"), Err(Error::Config(_))));
        let mut bytes = encode_weights(&small_surrogate(4));
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(decode_weights(&bytes), Err(Error::Format(_))));
        assert!(matches!(decode_weights(b"XXXX"), Err(Error::Format(_))));
    }

    #[test]
    fn input_gradient_matches_central_differences() {
        // The encoder is piecewise linear, so a finite difference is only
        // meaningful where no ReLU or max-pool switch lies within the step.
        // Points where forward and backward differences disagree are skipped.
        let s = small_surrogate(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut checked = 0;
        for _ in 0..12 {
            let x = Tensor::from_vec([1, 3, 8, 8], (0..192).map(|_| rng.gen_range(0.2..0.8)).collect());
            let v: Vec<f32> = (0..192).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let head: Vec<f32> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let scalar = |t: &Tensor| -> f64 { s.embed(t).data().iter().zip(&head).map(|(a, b)| (*a as f64) * (*b as f64)).sum() };
            let (_, dx) = s
                .embed_with_input_grad(&x, &mut |e| Ok(Tensor::from_vec(e.shape(), head.clone())))
                .unwrap();
            let analytic: f64 = dx.data().iter().zip(&v).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
            let h = 1e-3f32;
            let shift = |sign: f32| Tensor::from_vec(x.shape(), x.data().iter().zip(&v).map(|(a, b)| a + sign * h * b).collect());
            let (f0, fp, fm) = (scalar(&x), scalar(&shift(1.0)), scalar(&shift(-1.0)));
            let (fwd, bwd) = ((fp - f0) / h as f64, (f0 - fm) / h as f64);
            if (fwd - bwd).abs() > 1e-2 * fwd.abs().max(1e-1) {
                continue;
            }
            let fd = (fp - fm) / (2.0 * h as f64);
            assert!((fd - analytic).abs() / fd.abs().max(1e-1) < 1e-2, "fd {fd} analytic {analytic}");
            checked += 1;
        }
        assert!(checked >= 6, "only {checked} locally linear probes");
    }
}
