//! Target-model evaluation and the experiment grid built on it.

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{make_grouping, mix_datasets, relabel, LabelMapping, LabeledImageDataset};
use crate::error::{ensure, Result};
use crate::generator::{generate_unlearnable_clusters, nearest_center_assignment, GeneratorConfig};
use crate::model::ConvNet;
use crate::perturbation::{apply_perturbations, PerturbationSet};
use crate::surrogate::FeatureExtractor;
use crate::train::{self, TrainerConfig};

/// Metrics of one trained target model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub experiment: String,
    /// Short description of the grid cell, e.g. `n=5`.
    pub params: String,
    pub seed: u64,
    pub train_set: String,
    pub clean_test_acc: f32,
    pub perturbed_test_acc: Option<f32>,
    /// Clean-test accuracy per category (NaN-free; empty categories give 0).
    pub per_category_acc: Vec<f32>,
    pub train_loss_curve: Vec<f32>,
    pub train_acc_curve: Vec<f32>,
    pub clean_test_curve: Vec<f32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub perturbed_test_curve: Vec<f32>,
    pub config: TrainerConfig,
    /// Settings of the command that produced the report, when run from the CLI.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<serde_json::Value>,
}

impl EvalReport {
    fn file_stem(&self) -> String {
        let params: String = self
            .params
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                    c
                } else {
                    '_'
                }
            })
            .collect();
        format!("{}-{}-seed{}", self.experiment, params, self.seed)
    }
}

/// Per-category accuracy over the samples of each category present in `labels`.
pub fn per_category_accuracy(predictions: &[usize], labels: &[usize], categories: usize) -> Vec<f32> {
    let mut hits = vec![0usize; categories];
    let mut counts = vec![0usize; categories];
    for (&p, &l) in predictions.iter().zip(labels) {
        counts[l] += 1;
        hits[l] += usize::from(p == l);
    }
    hits.iter()
        .zip(&counts)
        .map(|(&h, &c)| if c == 0 { 0.0 } else { h as f32 / c as f32 })
        .collect()
}

/// Perturb held-out images with the stored deltas, placing each image in
/// the cluster whose center is nearest to its embedding.
pub fn perturb_test_set(test: &LabeledImageDataset, set: &PerturbationSet, f_s: &dyn FeatureExtractor) -> Result<LabeledImageDataset> {
    let rule = |d: &LabeledImageDataset| nearest_center_assignment(set, f_s, d);
    apply_perturbations(test, set, Some(&rule))
}

/// Train a fresh target on `train` and evaluate it on `test` (and on
/// `perturbed_test` when given) after every epoch.
pub fn train_target(
    train_ds: &LabeledImageDataset,
    test: &LabeledImageDataset,
    perturbed_test: Option<&LabeledImageDataset>,
    config: &TrainerConfig,
) -> Result<(EvalReport, ConvNet)> {
    ensure!(
        train_ds.num_categories == test.num_categories,
        Parameter,
        "train set has {} categories, test set {}",
        train_ds.num_categories,
        test.num_categories
    );
    if let Some(p) = perturbed_test {
        ensure!(
            p.len() == test.len(),
            Parameter,
            "perturbed test set differs in size from the test set"
        );
    }
    let test_labels = test.labels();
    let mut clean_curve = Vec::with_capacity(config.epochs);
    let mut perturbed_curve = Vec::new();
    let mut net = ConvNet::new(config.net_config(train_ds.num_categories), config.seed)?;
    let history = train::fit(&mut net, train_ds, &train_ds.labels(), config, |_, net| {
        clean_curve.push(train::accuracy(&train::predict(net, test, config), &test_labels));
        if let Some(p) = perturbed_test {
            perturbed_curve.push(train::accuracy(&train::predict(net, p, config), &test_labels));
        }
        Ok(())
    })?;
    let predictions = train::predict(&net, test, config);
    let report = EvalReport {
        experiment: "train_target".into(),
        params: String::new(),
        seed: config.seed,
        train_set: train_ds.name.clone(),
        clean_test_acc: train::accuracy(&predictions, &test_labels),
        perturbed_test_acc: perturbed_curve.last().copied(),
        per_category_acc: per_category_accuracy(&predictions, &test_labels, test.num_categories),
        train_loss_curve: history.iter().map(|s| s.mean_loss).collect(),
        train_acc_curve: history.iter().map(|s| s.train_acc).collect(),
        clean_test_curve: clean_curve,
        perturbed_test_curve: perturbed_curve,
        config: config.clone(),
        run_config: None,
    };
    Ok((report, net))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelabelRow {
    pub n: usize,
    pub seed: u64,
    pub accuracy: f32,
    pub chance: f32,
    pub report: EvalReport,
}

/// The hacker's relabeling: `n == m` keeps the labels, otherwise a balanced
/// seeded grouping of the `m` categories into `n`.
pub fn hacker_mapping(m: usize, n: usize, grouping_seed: u64) -> Result<LabelMapping> {
    if n == m {
        Ok(LabelMapping::identity(m))
    } else {
        make_grouping(m, n, grouping_seed)
    }
}

/// Train on `protected` relabeled into each `n` and test on the equally
/// relabeled clean test set. One row per `(n, seed)`.
pub fn run_relabel_experiment(
    protected: &LabeledImageDataset,
    test: &LabeledImageDataset,
    n_values: &[usize],
    seeds: &[u64],
    trainer: &TrainerConfig,
    grouping_seed: u64,
) -> Result<Vec<RelabelRow>> {
    let m = protected.num_categories;
    for &n in n_values {
        ensure!((2..=m).contains(&n), Parameter, "relabel target n = {n} outside [2, {m}]");
    }
    let cells: Vec<(usize, u64)> = n_values.iter().flat_map(|&n| seeds.iter().map(move |&s| (n, s))).collect();
    cells
        .par_iter()
        .map(|&(n, seed)| {
            let mapping = hacker_mapping(m, n, grouping_seed)?;
            let config = TrainerConfig { seed, ..trainer.clone() };
            let (mut report, _) = train_target(&relabel(protected, &mapping)?, &relabel(test, &mapping)?, None, &config)?;
            report.experiment = "relabel".into();
            report.params = format!("n={n}");
            Ok(RelabelRow {
                n,
                seed,
                accuracy: report.clean_test_acc,
                chance: 1.0 / n as f32,
                report,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureRow {
    /// The first `clean_count` categories are left unprotected.
    pub clean_count: usize,
    pub overall_acc: f32,
    /// Accuracy on test samples of the clean categories (None when there are none).
    pub clean_category_acc: Option<f32>,
    pub protected_category_acc: Option<f32>,
    /// Accuracy on the clean categories of a model trained on them alone.
    pub control_acc: Option<f32>,
    pub report: EvalReport,
    pub control: Option<EvalReport>,
}

fn subset_accuracy(predictions: &[usize], labels: &[usize], keep: impl Fn(usize) -> bool) -> Option<f32> {
    let pairs: Vec<(usize, usize)> = predictions
        .iter()
        .zip(labels)
        .filter(|(_, &l)| keep(l))
        .map(|(&p, &l)| (p, l))
        .collect();
    (!pairs.is_empty()).then(|| pairs.iter().filter(|(p, l)| p == l).count() as f32 / pairs.len() as f32)
}

pub fn run_mixture_experiment(
    clean: &LabeledImageDataset,
    protected: &LabeledImageDataset,
    test: &LabeledImageDataset,
    clean_counts: &[usize],
    trainer: &TrainerConfig,
) -> Result<Vec<MixtureRow>> {
    let m = clean.num_categories;
    for &c in clean_counts {
        ensure!(c <= m, Parameter, "cannot keep {c} of {m} categories clean");
    }
    let labels = test.labels();
    clean_counts
        .par_iter()
        .map(|&c| {
            let keep: BTreeSet<usize> = (0..c).collect();
            let mixed = mix_datasets(clean, protected, &keep)?;
            let (mut report, net) = train_target(&mixed, test, None, trainer)?;
            report.experiment = "mixture".into();
            report.params = format!("clean={c}");
            let predictions = train::predict(&net, test, trainer);
            let control = if c == 0 {
                None
            } else {
                let clean_test = test.filter_labels(&keep);
                let (mut r, _) = train_target(&clean.filter_labels(&keep), &clean_test, None, trainer)?;
                r.experiment = "mixture_control".into();
                r.params = format!("clean={c}");
                Some(r)
            };
            Ok(MixtureRow {
                clean_count: c,
                overall_acc: report.clean_test_acc,
                clean_category_acc: subset_accuracy(&predictions, &labels, |l| l < c),
                protected_category_acc: subset_accuracy(&predictions, &labels, |l| l >= c),
                control_acc: control.as_ref().map(|r| r.clean_test_acc),
                report,
                control,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub p: usize,
    pub accuracy: f32,
    pub perturbed_accuracy: Option<f32>,
    pub report: EvalReport,
}

/// Full generation and evaluation for each cluster count.
pub fn run_cluster_sweep(
    train_ds: &LabeledImageDataset,
    test: &LabeledImageDataset,
    f_s: &dyn FeatureExtractor,
    p_values: &[usize],
    config: &GeneratorConfig,
    trainer: &TrainerConfig,
) -> Result<Vec<SweepRow>> {
    p_values
        .iter()
        .map(|&p| {
            let run = generate_unlearnable_clusters(train_ds, f_s, p, config)?;
            let protected = apply_perturbations(train_ds, &run.set, None)?;
            let perturbed_test = perturb_test_set(test, &run.set, f_s)?;
            let (mut report, _) = train_target(&protected, test, Some(&perturbed_test), trainer)?;
            report.experiment = "sweep".into();
            report.params = format!("p={p}");
            Ok(SweepRow {
                p,
                accuracy: report.clean_test_acc,
                perturbed_accuracy: report.perturbed_test_acc,
                report,
            })
        })
        .collect()
}

fn fmt_opt(v: Option<f32>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Each report gets a JSON file plus `<stem>.curves.csv`. A `summary.csv`
/// row is added per report, in the given order.
pub fn write_reports(dir: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut summary = csv::Writer::from_writer(Vec::new());
    summary
        .write_record(["experiment", "params", "seed", "clean_test_acc", "perturbed_test_acc"])
        .map_err(csv_err)?;
    for r in reports {
        let stem = r.file_stem();
        crate::io::write_json(&dir.join(format!("{stem}.json")), r)?;
        let mut curves = csv::Writer::from_writer(Vec::new());
        curves
            .write_record(["epoch", "train_acc", "clean_test_acc", "perturbed_test_acc"])
            .map_err(csv_err)?;
        for (e, (tr, te)) in r.train_acc_curve.iter().zip(&r.clean_test_curve).enumerate() {
            let pt = fmt_opt(r.perturbed_test_curve.get(e).copied());
            curves
                .write_record([e.to_string(), tr.to_string(), te.to_string(), pt])
                .map_err(csv_err)?;
        }
        crate::io::write_file_atomic(
            &dir.join(format!("{stem}.curves.csv")),
            &curves.into_inner().map_err(|e| csv_err(e.into_error().into()))?,
        )?;
        summary
            .write_record([
                r.experiment.clone(),
                r.params.clone(),
                r.seed.to_string(),
                r.clean_test_acc.to_string(),
                fmt_opt(r.perturbed_test_acc),
            ])
            .map_err(csv_err)?;
    }
    crate::io::write_file_atomic(
        &dir.join("summary.csv"),
        &summary.into_inner().map_err(|e| csv_err(e.into_error().into()))?,
    )
}

fn csv_err(e: csv::Error) -> crate::error::Error {
    crate::error::Error::Format(format!("csv: {e}"))
}
