//! Reference noise generators: error-minimizing (EMinN), error-maximizing
//! (EMaxN) and synthetic class-wise patterns (SynPer). All of them take the
//! surrogate's predicted labels, never the ground truth.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Image, LabeledImageDataset};
use crate::error::{ensure, Error, Result};
use crate::model::ConvNet;
use crate::nn::{argmax, one_hot, Adam};
use crate::perturbation::{NoiseMode, PerturbationSet, Trailer};
use crate::tensor::Tensor;
use crate::train::{input_gradient, train_step, EVAL_BATCH};

/// Same container as the cluster-wise noise, tagged sample-wise or class-wise.
pub type SampleNoiseSet = PerturbationSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EminnConfig {
    pub eps: f32,
    /// Surrogate training steps per round.
    pub train_steps: usize,
    /// Noise steps per round.
    pub noise_steps: usize,
    pub max_rounds: usize,
    /// Stop once accuracy on the perturbed data reaches this fraction.
    pub stop_accuracy: f32,
    /// Step size as a fraction of eps.
    pub step_fraction: f32,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for EminnConfig {
    fn default() -> Self {
        Self {
            eps: 16.0 / 255.0,
            train_steps: 10,
            noise_steps: 20,
            max_rounds: 30,
            stop_accuracy: 0.95,
            step_fraction: 0.1,
            batch: 64,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmaxnConfig {
    pub eps: f32,
    pub steps: usize,
    /// Step size as a fraction of eps.
    pub step_fraction: f32,
    pub batch: usize,
}

impl Default for EmaxnConfig {
    fn default() -> Self {
        Self {
            eps: 16.0 / 255.0,
            steps: 10,
            step_fraction: 0.25,
            batch: 64,
        }
    }
}

fn check_inputs(ds: &LabeledImageDataset, labels: &[usize], classes: usize, eps: f32) -> Result<(usize, usize)> {
    ensure!(!ds.is_empty(), Parameter, "cannot generate noise for an empty dataset");
    ensure!(
        labels.len() == ds.len(),
        Parameter,
        "expected {} labels, got {}",
        ds.len(),
        labels.len()
    );
    ensure!(
        labels.iter().all(|&l| l < classes),
        Parameter,
        "predicted label outside the surrogate's {classes} classes"
    );
    ensure!((0.0..1.0).contains(&eps), Parameter, "eps must lie in [0, 1)");
    Ok(ds.image_size().unwrap())
}

/// One signed-gradient step on `delta` followed by projection onto the
/// eps-ball and the valid pixel range. `direction` is -1 to descend.
fn pgd_update(x: &[f32], delta: &mut [f32], grad: &[f32], step: f32, eps: f32, direction: f32) {
    for ((d, &g), &xv) in delta.iter_mut().zip(grad).zip(x) {
        let moved = *d + direction * step * g.signum() * f32::from(g != 0.0);
        let bounded = moved.clamp(-eps, eps);
        *d = (xv + bounded).clamp(0.0, 1.0) - xv;
        *d = d.clamp(-eps, eps);
    }
}

fn perturbed_batch(ds: &LabeledImageDataset, idx: &[usize], deltas: &[Vec<f32>]) -> Tensor {
    let mut x = ds.batch(idx);
    for (row, &i) in idx.iter().enumerate() {
        for (v, d) in x.item_mut(row).iter_mut().zip(&deltas[i]) {
            *v = (*v + d).clamp(0.0, 1.0);
        }
    }
    x
}

/// PGD over every sample with the network fixed.
fn pgd_all(
    net: &ConvNet,
    ds: &LabeledImageDataset,
    labels: &[usize],
    deltas: &mut [Vec<f32>],
    steps: usize,
    step: f32,
    eps: f32,
    direction: f32,
    batch: usize,
) {
    let classes = net.config.num_classes;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch) {
        let clean = ds.batch(chunk);
        let targets = one_hot(&chunk.iter().map(|&i| labels[i]).collect::<Vec<_>>(), classes);
        for _ in 0..steps {
            let x = perturbed_batch(ds, chunk, deltas);
            let (_, dx) = input_gradient(net, &x, &targets);
            for (row, &i) in chunk.iter().enumerate() {
                pgd_update(clean.item(row), &mut deltas[i], dx.item(row), step, eps, direction);
            }
        }
    }
}

fn accuracy_on(net: &ConvNet, ds: &LabeledImageDataset, labels: &[usize], deltas: &[Vec<f32>]) -> f32 {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut hits = 0;
    for chunk in idx.chunks(EVAL_BATCH) {
        let preds = net.predict(&perturbed_batch(ds, chunk, deltas));
        hits += chunk.iter().zip(preds).filter(|(&i, p)| labels[i] == *p).count();
    }
    hits as f32 / ds.len() as f32
}

/// Mean cross-entropy of `net` on `x + delta` against `labels`.
pub fn mean_loss(net: &ConvNet, ds: &LabeledImageDataset, labels: &[usize], set: Option<&PerturbationSet>) -> f32 {
    let zero = vec![0.0; ds.batch(&[0]).item_len()];
    let deltas: Vec<Vec<f32>> = (0..ds.len())
        .map(|i| match set {
            Some(s) => s.deltas[s.trailer.assignment[&ds.samples[i].id]].to_chw(),
            None => zero.clone(),
        })
        .collect();
    let classes = net.config.num_classes;
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut total = 0.0f64;
    for chunk in idx.chunks(EVAL_BATCH) {
        let targets = one_hot(&chunk.iter().map(|&i| labels[i]).collect::<Vec<_>>(), classes);
        let (loss, _) = input_gradient(net, &perturbed_batch(ds, chunk, &deltas), &targets);
        total += loss as f64 * chunk.len() as f64;
    }
    (total / ds.len() as f64) as f32
}

fn sample_wise_set(ds: &LabeledImageDataset, deltas: Vec<Vec<f32>>, eps: f32, config: serde_json::Value) -> PerturbationSet {
    let (h, w) = ds.image_size().unwrap();
    PerturbationSet {
        mode: NoiseMode::SampleWise,
        eps,
        height: h,
        width: w,
        deltas: deltas.iter().map(|d| Image::from_chw(h, w, d)).collect(),
        trailer: Trailer {
            assignment: ds.samples.iter().enumerate().map(|(i, s)| (s.id.clone(), i)).collect(),
            config,
            ..Trailer::default()
        },
    }
}

/// Error-minimizing noise: alternate training a copy of the surrogate on
/// the perturbed data with PGD steps that lower its loss.
pub fn eminn_generate(ds: &LabeledImageDataset, surrogate: &ConvNet, labels: &[usize], config: &EminnConfig) -> Result<SampleNoiseSet> {
    Ok(eminn_generate_with_model(ds, surrogate, labels, config)?.0)
}

/// [`eminn_generate`], also returning the trained copy the noise was
/// minimized against.
pub fn eminn_generate_with_model(
    ds: &LabeledImageDataset,
    surrogate: &ConvNet,
    labels: &[usize],
    config: &EminnConfig,
) -> Result<(SampleNoiseSet, ConvNet)> {
    let (h, w) = check_inputs(ds, labels, surrogate.config.num_classes, config.eps)?;
    ensure!(
        config.batch >= 1 && config.max_rounds >= 1,
        Parameter,
        "batch and max_rounds must be positive"
    );
    let item = 3 * h * w;
    let mut deltas = vec![vec![0.0f32; item]; ds.len()];
    let echo = serde_json::json!({ "method": "eminn", "eminn": config });
    let mut net = surrogate.clone();
    if config.eps == 0.0 {
        return Ok((sample_wise_set(ds, deltas, 0.0, echo), net));
    }
    let mut opt = Adam::new(config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let classes = net.config.num_classes;
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut cursor = order.len();
    let step = config.eps * config.step_fraction;
    for round in 0..config.max_rounds {
        for _ in 0..config.train_steps {
            if cursor + config.batch > order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let chunk = &order[cursor..(cursor + config.batch).min(order.len())];
            cursor += chunk.len();
            let x = perturbed_batch(ds, chunk, &deltas);
            let targets = one_hot(&chunk.iter().map(|&i| labels[i]).collect::<Vec<_>>(), classes);
            let (loss, _) = train_step(&mut net, &mut opt, &x, &targets);
            if !loss.is_finite() {
                return Err(Error::Training(format!("non-finite surrogate loss in round {round}")));
            }
        }
        pgd_all(
            &net,
            ds,
            labels,
            &mut deltas,
            config.noise_steps,
            step,
            config.eps,
            -1.0,
            config.batch,
        );
        let acc = accuracy_on(&net, ds, labels, &deltas);
        log::info!("eminn round {round}: perturbed accuracy {acc:.3}");
        if acc >= config.stop_accuracy {
            break;
        }
    }
    Ok((sample_wise_set(ds, deltas, config.eps, echo), net))
}

/// Error-maximizing noise: an L-infinity PGD attack on the frozen surrogate.
pub fn emaxn_generate(ds: &LabeledImageDataset, surrogate: &ConvNet, labels: &[usize], config: &EmaxnConfig) -> Result<SampleNoiseSet> {
    let (h, w) = check_inputs(ds, labels, surrogate.config.num_classes, config.eps)?;
    ensure!(config.batch >= 1, Parameter, "batch must be positive");
    let mut deltas = vec![vec![0.0f32; 3 * h * w]; ds.len()];
    let step = config.eps * config.step_fraction;
    pgd_all(
        surrogate,
        ds,
        labels,
        &mut deltas,
        config.steps,
        step,
        config.eps,
        1.0,
        config.batch,
    );
    Ok(sample_wise_set(
        ds,
        deltas,
        config.eps,
        serde_json::json!({ "method": "emaxn", "emaxn": config }),
    ))
}

const SYNPER_ATTEMPTS: usize = 100_000;

/// One random `±eps` patch per class, tiled over the image. Patches of
/// different classes differ in at least half of their entries.
pub fn synper_generate(num_classes: usize, height: usize, width: usize, eps: f32, patch_size: usize, seed: u64) -> Result<SampleNoiseSet> {
    ensure!(num_classes >= 2, Parameter, "synthetic patterns need at least 2 classes");
    ensure!(patch_size >= 1, Parameter, "patch size must be positive");
    ensure!((0.0..1.0).contains(&eps), Parameter, "eps must lie in [0, 1)");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = patch_size * patch_size * 3;
    let mut patches: Vec<Vec<bool>> = Vec::with_capacity(num_classes);
    let mut attempts = 0;
    while patches.len() < num_classes {
        attempts += 1;
        if attempts > SYNPER_ATTEMPTS {
            return Err(Error::Generation(format!(
                "could not find {num_classes} separated {patch_size}x{patch_size} patches in {SYNPER_ATTEMPTS} draws"
            )));
        }
        let cand: Vec<bool> = (0..entries).map(|_| rng.gen()).collect();
        let separated = patches
            .iter()
            .all(|p| 2 * p.iter().zip(&cand).filter(|(a, b)| a != b).count() >= entries);
        if separated {
            patches.push(cand);
        }
    }
    let deltas = patches
        .iter()
        .map(|p| {
            let mut data = Vec::with_capacity(height * width * 3);
            for y in 0..height {
                for x in 0..width {
                    for c in 0..3 {
                        let on = p[((y % patch_size) * patch_size + x % patch_size) * 3 + c];
                        data.push(if on { eps } else { -eps });
                    }
                }
            }
            Image::new(height, width, data).expect("sized by construction")
        })
        .collect();
    Ok(PerturbationSet {
        mode: NoiseMode::ClassWise,
        eps,
        height,
        width,
        deltas,
        trailer: Trailer {
            config: serde_json::json!({ "method": "synper", "patch_size": patch_size, "seed": seed }),
            ..Trailer::default()
        },
    })
}

/// Point every sample at the class-wise delta of its predicted label.
pub fn assign_by_labels(mut set: PerturbationSet, ds: &LabeledImageDataset, labels: &[usize]) -> Result<PerturbationSet> {
    ensure!(
        labels.len() == ds.len(),
        Parameter,
        "expected {} labels, got {}",
        ds.len(),
        labels.len()
    );
    ensure!(
        labels.iter().all(|&l| l < set.len()),
        Parameter,
        "label beyond the {} class patterns",
        set.len()
    );
    set.trailer.assignment = ds
        .samples
        .iter()
        .zip(labels)
        .map(|(s, &l)| (s.id.clone(), l))
        .collect::<BTreeMap<_, _>>();
    Ok(set)
}

/// Surrogate predictions used as the labels every baseline consumes.
pub fn predicted_labels(net: &ConvNet, ds: &LabeledImageDataset) -> Vec<usize> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    idx.chunks(EVAL_BATCH)
        .flat_map(|chunk| {
            let logits = net.logits(&ds.batch(chunk));
            (0..chunk.len()).map(move |i| argmax(logits.item(i))).collect::<Vec<_>>()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_blobs, SynthConfig};
    use crate::model::ConvNetConfig;

    fn fixture() -> (LabeledImageDataset, ConvNet, Vec<usize>) {
        let ds = synth_blobs(&SynthConfig::new(3, 4, 8, 1)).unwrap().train;
        let net = ConvNet::new(
            ConvNetConfig {
                channels: vec![4, 8],
                embed_dim: 8,
                num_classes: 3,
            },
            2,
        )
        .unwrap();
        let labels = predicted_labels(&net, &ds);
        (ds, net, labels)
    }

    #[test]
    fn zero_budget_or_zero_steps_give_zero_noise() {
        let (ds, net, labels) = fixture();
        let e = eminn_generate(
            &ds,
            &net,
            &labels,
            &EminnConfig {
                eps: 0.0,
                ..EminnConfig::default()
            },
        )
        .unwrap();
        assert_eq!(e.max_abs(), 0.0);
        let m = emaxn_generate(
            &ds,
            &net,
            &labels,
            &EmaxnConfig {
                steps: 0,
                ..EmaxnConfig::default()
            },
        )
        .unwrap();
        assert_eq!(m.max_abs(), 0.0);
    }

    #[test]
    fn noise_stays_in_budget_and_moves_the_loss_the_right_way() {
        let (ds, net, labels) = fixture();
        let eps = 16.0 / 255.0;
        let clean = mean_loss(&net, &ds, &labels, None);
        let m = emaxn_generate(&ds, &net, &labels, &EmaxnConfig::default()).unwrap();
        assert!(m.max_abs() <= eps);
        assert!(mean_loss(&net, &ds, &labels, Some(&m)) >= clean);

        let config = EminnConfig {
            max_rounds: 2,
            ..EminnConfig::default()
        };
        let e = eminn_generate(&ds, &net, &labels, &config).unwrap();
        assert!(e.max_abs() <= eps);
        assert!(mean_loss(&net, &ds, &labels, Some(&e)) <= clean);
        for s in [&m, &e] {
            let out = crate::perturbation::apply_perturbations(&ds, s, None).unwrap();
            assert!(out.samples.iter().all(|s| s.pixels.in_unit_range()));
        }
    }

    #[test]
    fn synthetic_patterns_are_signed_separated_and_seeded() {
        let eps = 8.0 / 255.0;
        let a = synper_generate(10, 12, 12, eps, 4, 5).unwrap();
        assert_eq!(a, synper_generate(10, 12, 12, eps, 4, 5).unwrap());
        assert!(a.deltas.iter().all(|d| d.data().iter().all(|&v| v == eps || v == -eps)));
        let patch = |d: &Image| {
            (0..4)
                .flat_map(|y| (0..4).flat_map(move |x| (0..3).map(move |c| (y, x, c))))
                .map(|(y, x, c)| d.get(y, x, c))
                .collect::<Vec<_>>()
        };
        for i in 0..10 {
            for j in 0..i {
                let (p, q) = (patch(&a.deltas[i]), patch(&a.deltas[j]));
                assert!(2 * p.iter().zip(&q).filter(|(x, y)| x != y).count() >= p.len());
            }
        }
        assert!(matches!(synper_generate(10, 4, 4, eps, 1, 0), Err(Error::Generation(_))));
    }
}
