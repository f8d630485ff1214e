//! Supervised training loop shared by surrogate and target models.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{self, Augmentation, Defense};
use crate::dataset::LabeledImageDataset;
use crate::error::{ensure, Error, Result};
use crate::model::{ConvNet, ConvNetConfig};
use crate::nn::{argmax, one_hot, softmax_cross_entropy, Adam};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
    pub augmentation: BTreeSet<Augmentation>,
    pub defense: Defense,
    /// Conv block widths of the trained network.
    pub channels: Vec<usize>,
    pub embed_dim: usize,
    /// Target side for [`Augmentation::Resize`]; native size when `None`.
    pub resize_side: Option<usize>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch: 64,
            lr: 2e-3,
            seed: 0,
            augmentation: [Augmentation::Resize, Augmentation::RandomCrop, Augmentation::RandomHorizontalFlip]
                .into_iter()
                .collect(),
            defense: Defense::None,
            channels: vec![16, 32, 64],
            embed_dim: 128,
            resize_side: None,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.epochs >= 1, Parameter, "epochs must be at least 1");
        ensure!(self.batch >= 1, Parameter, "batch must be at least 1");
        ensure!(self.lr > 0.0 && self.lr.is_finite(), Parameter, "learning rate must be positive");
        self.defense.validate()
    }

    pub fn without_augmentation(mut self) -> Self {
        self.augmentation.clear();
        self
    }

    pub fn net_config(&self, num_classes: usize) -> ConvNetConfig {
        ConvNetConfig {
            channels: self.channels.clone(),
            embed_dim: self.embed_dim,
            num_classes,
        }
    }

    /// Deterministic preprocessing applied to both training and evaluation
    /// inputs (resize, normalize).
    pub fn preprocess(&self, batch: Tensor) -> Tensor {
        let mut batch = match (self.augmentation.contains(&Augmentation::Resize), self.resize_side) {
            (true, Some(side)) => augment::resize(&batch, side),
            _ => batch,
        };
        if self.augmentation.contains(&Augmentation::Normalize) {
            augment::normalize(&mut batch);
        }
        batch
    }
}

/// Per-epoch training statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f32,
    /// Accuracy of the (augmented) training batches against their hard labels.
    pub train_acc: f32,
}

/// Train `net` on `ds` against `labels` (one per sample). `on_epoch` is
/// called after every epoch with the current network.
pub fn fit(
    net: &mut ConvNet,
    ds: &LabeledImageDataset,
    labels: &[usize],
    config: &TrainerConfig,
    mut on_epoch: impl FnMut(&EpochStats, &ConvNet) -> Result<()>,
) -> Result<Vec<EpochStats>> {
    config.validate()?;
    ensure!(!ds.is_empty(), Parameter, "cannot train on an empty dataset");
    ensure!(
        labels.len() == ds.len(),
        Parameter,
        "expected {} labels, got {}",
        ds.len(),
        labels.len()
    );
    let classes = net.config.num_classes;
    ensure!(
        labels.iter().all(|&l| l < classes),
        Parameter,
        "label out of range for {classes} classes"
    );

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Adam::new(config.lr);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for chunk in order.chunks(config.batch) {
            let mut x = ds.batch(chunk);
            if config.augmentation.contains(&Augmentation::RandomCrop) {
                augment::random_crop(&mut x, &mut rng);
            }
            if config.augmentation.contains(&Augmentation::RandomHorizontalFlip) {
                augment::random_horizontal_flip(&mut x, &mut rng);
            }
            let hard: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut targets = one_hot(&hard, classes);
            config.defense.apply(&mut x, &mut targets, &mut rng)?;
            let x = config.preprocess(x);

            let (loss, logits) = train_step(net, &mut opt, &x, &targets);
            if !loss.is_finite() {
                return Err(Error::Training(format!("non-finite loss at epoch {epoch}")));
            }
            loss_sum += loss as f64 * chunk.len() as f64;
            correct += (0..chunk.len()).filter(|&i| argmax(logits.item(i)) == hard[i]).count();
        }
        let stats = EpochStats {
            epoch,
            mean_loss: (loss_sum / ds.len() as f64) as f32,
            train_acc: correct as f32 / ds.len() as f32,
        };
        log::debug!("epoch {epoch}: loss {:.4} train acc {:.3}", stats.mean_loss, stats.train_acc);
        on_epoch(&stats, net)?;
        history.push(stats);
    }
    Ok(history)
}

/// One optimizer step on a prepared batch. Returns the mean loss and the
/// logits computed before the update.
pub fn train_step(net: &mut ConvNet, opt: &mut Adam, x: &Tensor, targets: &[f32]) -> (f32, Tensor) {
    let (emb, ftape) = net.features.forward_tape(x);
    let (logits, htape) = net.head.forward_tape(&emb);
    let (loss, grad) = softmax_cross_entropy(&logits, targets);
    if !loss.is_finite() {
        return (loss, logits);
    }
    let mut hgrads = net.head.zero_grads();
    let gemb = net.head.backward(htape, grad, Some(&mut hgrads), true).unwrap();
    let mut fgrads = net.features.zero_grads();
    net.features.backward(ftape, gemb, Some(&mut fgrads), false);
    fgrads.extend(hgrads);
    opt.step(net.params_mut(), &fgrads);
    (loss, logits)
}

/// Mean cross-entropy of `net` on `x` and its gradient w.r.t. `x`.
pub fn input_gradient(net: &ConvNet, x: &Tensor, targets: &[f32]) -> (f32, Tensor) {
    let (emb, ftape) = net.features.forward_tape(x);
    let (logits, htape) = net.head.forward_tape(&emb);
    let (loss, grad) = softmax_cross_entropy(&logits, targets);
    let gemb = net.head.backward(htape, grad, None, true).unwrap();
    (loss, net.features.backward(ftape, gemb, None, true).unwrap())
}

pub const EVAL_BATCH: usize = 256;

/// Argmax predictions for every sample of `ds`.
pub fn predict(net: &ConvNet, ds: &LabeledImageDataset, config: &TrainerConfig) -> Vec<usize> {
    let mut out = Vec::with_capacity(ds.len());
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        out.extend(net.predict(&config.preprocess(ds.batch(chunk))));
    }
    out
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f32 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f32 / labels.len() as f32
}

/// Fresh network trained on the dataset's own labels.
pub fn train_classifier(ds: &LabeledImageDataset, config: &TrainerConfig) -> Result<(ConvNet, Vec<EpochStats>)> {
    let mut net = ConvNet::new(config.net_config(ds.num_categories), config.seed)?;
    let history = fit(&mut net, ds, &ds.labels(), config, |_, _| Ok(()))?;
    Ok((net, history))
}
