//! Cluster-wise noise generation.
//!
//! Each cluster gets a freshly initialized encoder-decoder network `G` that
//! maps a fixed uniform noise image `sigma` to a perturbation
//! `delta = clamp(eps * tanh(G(sigma)), -eps, eps)`. The network is trained
//! so that the surrogate embeddings of `clamp(x + delta, 0, 1)` for every
//! member `x` of the cluster move towards the center of the next cluster.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{self, ClusterModel, KMeansConfig};
use crate::dataset::{Image, LabeledImageDataset};
use crate::error::{ensure, Error, Result};
use crate::nn::{Adam, Conv2d, Layer, Sequential};
use crate::perturbation::{LossTrace, NoiseMode, PerturbationSet, Trailer};
use crate::surrogate::{extract_embeddings, EmbeddingMatrix, FeatureExtractor};
use crate::tensor::Tensor;

/// Distance `d` between a perturbed embedding and its target center.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    SquaredEuclidean,
    CosineDistance,
}

impl Metric {
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "squared_euclidean" | "euclidean" | "l2" => Some(Metric::SquaredEuclidean),
            "cosine_distance" | "cosine" => Some(Metric::CosineDistance),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub eps: f32,
    /// Optimization epochs per cluster.
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub metric: Metric,
    pub seed: u64,
    /// Channels of the noise input `sigma`; its spatial size is the image's.
    pub sigma_channels: usize,
    /// Encoder widths; each stage halves the resolution and the decoder
    /// mirrors it. An empty list gives a single convolution.
    pub widths: Vec<usize>,
    /// Optimize clusters on the rayon pool. Results do not depend on it.
    pub parallel: bool,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            eps: 16.0 / 255.0,
            epochs: 50,
            batch: 64,
            lr: 1e-3,
            metric: Metric::SquaredEuclidean,
            seed: 0,
            sigma_channels: 3,
            widths: vec![8, 16],
            parallel: true,
            kmeans_max_iters: 300,
            kmeans_tol: 1e-4,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        // eps = 0 is accepted as a degenerate budget that yields zero noise.
        ensure!(
            self.eps >= 0.0 && self.eps < 1.0,
            Parameter,
            "eps must lie in [0, 1), got {}",
            self.eps
        );
        ensure!(self.epochs >= 1, Parameter, "epochs must be at least 1");
        ensure!(self.batch >= 1, Parameter, "batch must be at least 1");
        ensure!(self.lr > 0.0 && self.lr.is_finite(), Parameter, "learning rate must be positive");
        ensure!(self.sigma_channels >= 1, Parameter, "sigma needs at least one channel");
        ensure!(self.widths.iter().all(|&w| w >= 1), Parameter, "generator widths must be positive");
        Ok(())
    }

    /// Seed of cluster `i`: the run seed xor the cluster index.
    pub fn cluster_seed(&self, i: usize) -> u64 {
        self.seed ^ i as u64
    }
}

/// `sum_j d(e_j, c)` over the rows of `e`.
pub fn ddu_loss(e: &EmbeddingMatrix, center: &[f32], metric: Metric) -> Result<f64> {
    ensure!(
        e.dim() == center.len(),
        Parameter,
        "embedding width {} vs center width {}",
        e.dim(),
        center.len()
    );
    let t = Tensor::matrix(e.rows(), e.dim(), e.data().to_vec());
    Ok(ddu_loss_grad(&t, center, metric)?.0)
}

/// Loss and its gradient w.r.t. the embedding rows of `e` (`N x d`).
pub fn ddu_loss_grad(e: &Tensor, center: &[f32], metric: Metric) -> Result<(f64, Tensor)> {
    let d = e.item_len();
    ensure!(d == center.len(), Parameter, "embedding width {d} vs center width {}", center.len());
    let mut grad = Tensor::zeros(e.shape());
    let mut total = 0f64;
    let c_norm = center.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    for i in 0..e.batch() {
        let row = e.item(i);
        let g = grad.item_mut(i);
        match metric {
            Metric::SquaredEuclidean => {
                for ((gv, &a), &b) in g.iter_mut().zip(row).zip(center) {
                    let diff = a as f64 - b as f64;
                    total += diff * diff;
                    *gv = (2.0 * diff) as f32;
                }
            }
            Metric::CosineDistance => {
                let e_norm = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                if e_norm == 0.0 || c_norm == 0.0 {
                    return Err(Error::Numeric("cosine distance of a zero-norm vector".into()));
                }
                let dot: f64 = row.iter().zip(center).map(|(&a, &b)| a as f64 * b as f64).sum();
                let cos = dot / (e_norm * c_norm);
                total += 1.0 - cos;
                for ((gv, &a), &b) in g.iter_mut().zip(row).zip(center) {
                    *gv = (-(b as f64 / (e_norm * c_norm) - cos * a as f64 / (e_norm * e_norm))) as f32;
                }
            }
        }
    }
    Ok((total, grad))
}

/// Encoder-decoder network producing one image-shaped perturbation.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseGenerator {
    pub net: Sequential,
    pub height: usize,
    pub width: usize,
    pub sigma_channels: usize,
}

impl NoiseGenerator {
    pub fn new(height: usize, width: usize, config: &GeneratorConfig, rng: &mut impl Rng) -> Result<Self> {
        let scale = 1usize << config.widths.len();
        ensure!(
            height % scale == 0 && width % scale == 0,
            Parameter,
            "a generator with {} stages needs image sides divisible by {scale}, got {height}x{width}",
            config.widths.len()
        );
        let mut layers = Vec::new();
        let mut c = config.sigma_channels;
        for &w in &config.widths {
            layers.push(Layer::Conv2d(Conv2d::new(c, w, 3, 2, 1, rng)));
            layers.push(Layer::Relu);
            c = w;
        }
        for (i, _) in config.widths.iter().enumerate().rev() {
            let out = if i == 0 { Image::CHANNELS } else { config.widths[i - 1] };
            layers.push(Layer::Upsample2);
            layers.push(Layer::Conv2d(Conv2d::new(c, out, 3, 1, 1, rng)));
            if i > 0 {
                layers.push(Layer::Relu);
            }
            c = out;
        }
        if config.widths.is_empty() {
            layers.push(Layer::Conv2d(Conv2d::new(c, Image::CHANNELS, 3, 1, 1, rng)));
        }
        layers.push(Layer::Tanh);
        Ok(Self {
            net: Sequential::new(layers),
            height,
            width,
            sigma_channels: config.sigma_channels,
        })
    }

    pub fn sigma_shape(&self) -> [usize; 4] {
        [1, self.sigma_channels, self.height, self.width]
    }

    /// Uniform(0, 1) noise input of the right shape.
    pub fn sample_sigma(&self, rng: &mut impl Rng) -> Tensor {
        let shape = self.sigma_shape();
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen::<f32>()).collect())
    }
}

fn bounded(raw: &Tensor, eps: f32) -> Tensor {
    raw.map(|v| (eps * v).clamp(-eps, eps))
}

/// `delta = clamp(eps * G(sigma), -eps, eps)` as a `1 x 3 x H x W` tensor.
pub fn generate_delta(gen: &NoiseGenerator, sigma: &Tensor, eps: f32) -> Result<Tensor> {
    ensure!(
        sigma.shape() == gen.sigma_shape(),
        Parameter,
        "sigma shape {:?} != {:?}",
        sigma.shape(),
        gen.sigma_shape()
    );
    let raw = gen.net.forward(sigma);
    ensure!(raw.all_finite(), Numeric, "generator produced non-finite values");
    Ok(bounded(&raw, eps))
}

/// Add `delta` (`1 x C x H x W`) to every image of `x` and clamp to `[0, 1]`.
fn add_delta(x: &Tensor, delta: &Tensor) -> Tensor {
    let mut out = x.clone();
    for i in 0..out.batch() {
        for (v, d) in out.item_mut(i).iter_mut().zip(delta.data()) {
            *v = (*v + d).clamp(0.0, 1.0);
        }
    }
    out
}

fn gather(images: &Tensor, idx: &[usize]) -> Tensor {
    let [_, c, h, w] = images.shape();
    Tensor::stack(idx.iter().map(|&i| images.item(i)), [c, h, w])
}

/// Mean loss of the whole cluster under a fixed delta.
fn mean_loss(images: &Tensor, delta: &Tensor, target: &[f32], f_s: &dyn FeatureExtractor, config: &GeneratorConfig) -> Result<f64> {
    let n = images.batch();
    let idx: Vec<usize> = (0..n).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(config.batch.max(64)) {
        let e = f_s.embed(&add_delta(&gather(images, chunk), delta));
        total += ddu_loss_grad(&e, target, config.metric)?.0;
    }
    Ok(total / n as f64)
}

/// Loss of one mini-batch and the gradient w.r.t. the generator parameters.
pub fn ddu_step_gradient(
    gen: &NoiseGenerator,
    sigma: &Tensor,
    batch: &Tensor,
    target: &[f32],
    f_s: &dyn FeatureExtractor,
    config: &GeneratorConfig,
) -> Result<(f64, Vec<Vec<f32>>)> {
    let eps = config.eps;
    let (raw, tape) = gen.net.forward_tape(sigma);
    ensure!(raw.all_finite(), Numeric, "generator produced non-finite values");
    let delta = bounded(&raw, eps);
    let x_adv = add_delta(batch, &delta);
    let mut loss = 0.0;
    let (_, dx) = f_s.embed_with_input_grad(&x_adv, &mut |e| {
        let (l, g) = ddu_loss_grad(e, target, config.metric)?;
        loss = l;
        Ok(g)
    })?;
    // delta is shared by the batch; pixels pinned by the [0, 1] clamp pass no gradient.
    let mut g_raw = Tensor::zeros(raw.shape());
    for i in 0..batch.batch() {
        let (xi, gi) = (batch.item(i), dx.item(i));
        for (j, g) in g_raw.data_mut().iter_mut().enumerate() {
            let v = xi[j] + delta.data()[j];
            if v > 0.0 && v < 1.0 {
                *g += gi[j];
            }
        }
    }
    for (g, &r) in g_raw.data_mut().iter_mut().zip(raw.data()) {
        // d clamp(eps * r) / dr, with the clamp only active at |r| = 1.
        *g *= if (eps * r).abs() < eps { eps } else { 0.0 };
    }
    let mut grads = gen.net.zero_grads();
    gen.net.backward(tape, g_raw, Some(&mut grads), false);
    Ok((loss, grads))
}

/// Result of optimizing one cluster.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterNoise {
    /// `1 x 3 x H x W`, within `[-eps, eps]`.
    pub delta: Tensor,
    pub trace: LossTrace,
}

/// Train a fresh generator so that `f_s(clamp(x + delta))` approaches
/// `target` for the images of one cluster (`N x 3 x H x W`).
pub fn optimize_cluster_perturbation(
    images: &Tensor,
    target: &[f32],
    f_s: &dyn FeatureExtractor,
    config: &GeneratorConfig,
    seed: u64,
) -> Result<ClusterNoise> {
    config.validate()?;
    ensure!(images.batch() > 0, Parameter, "cannot optimize an empty cluster");
    ensure!(
        f_s.differentiable(),
        Parameter,
        "the feature extractor does not provide input gradients"
    );
    ensure!(
        target.len() == f_s.embed_dim(),
        Parameter,
        "target center has width {}",
        target.len()
    );
    let [n, _, h, w] = images.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gen = NoiseGenerator::new(h, w, config, &mut rng)?;
    let sigma = gen.sample_sigma(&mut rng);
    let mut opt = Adam::new(config.lr);

    let initial = mean_loss(images, &generate_delta(&gen, &sigma, config.eps)?, target, f_s, config)?;
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch) {
            let (loss, grads) = ddu_step_gradient(&gen, &sigma, &gather(images, chunk), target, f_s, config)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!("non-finite DDU loss at epoch {epoch}")));
            }
            total += loss;
            opt.step(gen.net.params_mut(), &grads);
        }
        let mean = total / n as f64;
        if epochs.last().is_some_and(|&prev| mean >= prev) {
            log::debug!("DDU loss did not decrease at epoch {epoch}: {mean:.5}");
        }
        epochs.push(mean);
    }
    // Clamp once more before storing, so the saved delta is in budget by construction.
    let delta = generate_delta(&gen, &sigma, config.eps)?.map(|v| v.clamp(-config.eps, config.eps));
    let last = mean_loss(images, &delta, target, f_s, config)?;
    Ok(ClusterNoise {
        delta,
        trace: LossTrace { initial, epochs, last },
    })
}

/// Output of the full pipeline.
#[derive(Clone, Debug)]
pub struct UcRun {
    pub set: PerturbationSet,
    pub clusters: ClusterModel,
    pub embeddings: EmbeddingMatrix,
}

/// Cluster the surrogate embeddings into `p` groups, then optimize one
/// perturbation per cluster towards the next cluster's center.
pub fn generate_unlearnable_clusters(
    ds: &LabeledImageDataset,
    f_s: &dyn FeatureExtractor,
    p: usize,
    config: &GeneratorConfig,
) -> Result<UcRun> {
    config.validate()?;
    ensure!(
        p >= 2,
        Parameter,
        "p must be >= 2 (a single cluster has no wrong center to move to)"
    );
    ensure!(!ds.is_empty(), Parameter, "cannot protect an empty dataset");
    let (h, w) = ds.image_size().unwrap();

    let embeddings = extract_embeddings(f_s, ds, 256)?;
    let kmeans = KMeansConfig {
        max_iters: config.kmeans_max_iters,
        tol: config.kmeans_tol,
        ..KMeansConfig::new(p, config.seed)
    };
    let clusters = clustering::kmeans(&embeddings, &kmeans)?;
    let members: Vec<Vec<usize>> = (0..p)
        .map(|c| (0..ds.len()).filter(|&i| clusters.assignment[i] == c).collect())
        .collect();

    let run_one = |c: usize| -> Result<ClusterNoise> {
        let images = ds.batch(&members[c]);
        optimize_cluster_perturbation(&images, clusters.target_center(c), f_s, config, config.cluster_seed(c)).map_err(|e| Error::Cluster {
            cluster: c,
            source: Box::new(e),
        })
    };
    let results: Vec<Result<ClusterNoise>> = if config.parallel {
        (0..p).into_par_iter().map(run_one).collect()
    } else {
        (0..p).map(run_one).collect()
    };
    let mut deltas = Vec::with_capacity(p);
    let mut traces = Vec::with_capacity(p);
    for (c, r) in results.into_iter().enumerate() {
        let noise = r?;
        log::info!(
            "cluster {c}: {} samples, loss {:.4} -> {:.4}",
            members[c].len(),
            noise.trace.initial,
            noise.trace.last
        );
        deltas.push(Image::from_chw(h, w, noise.delta.data()));
        traces.push(noise.trace);
    }

    let assignment: BTreeMap<String, usize> = ds
        .samples
        .iter()
        .zip(&clusters.assignment)
        .map(|(s, &c)| (s.id.clone(), c))
        .collect();
    let set = PerturbationSet {
        mode: NoiseMode::Cluster,
        eps: config.eps,
        height: h,
        width: w,
        deltas,
        trailer: Trailer {
            assignment,
            centers: (0..p).map(|c| clusters.center(c).to_vec()).collect(),
            permutation: clusters.permutation.clone(),
            encoder: Some(f_s.descriptor()),
            config: serde_json::json!({ "p": p, "generator": config }),
            loss_traces: traces,
        },
    };
    set.validate()?;
    Ok(UcRun { set, clusters, embeddings })
}

/// Nearest stored center in `f_s` space for every sample of `ds`.
pub fn nearest_center_assignment(set: &PerturbationSet, f_s: &dyn FeatureExtractor, ds: &LabeledImageDataset) -> Result<Vec<usize>> {
    let centers = &set.trailer.centers;
    ensure!(!centers.is_empty(), Parameter, "perturbation set stores no cluster centers");
    let dim = centers[0].len();
    let model = ClusterModel {
        p: centers.len(),
        dim,
        centers: centers.iter().flatten().copied().collect(),
        assignment: Vec::new(),
        sizes: Vec::new(),
        permutation: set.trailer.permutation.clone(),
        seed: 0,
        inertia_history: Vec::new(),
    };
    clustering::assign(&model, &extract_embeddings(f_s, ds, 256)?)
}
