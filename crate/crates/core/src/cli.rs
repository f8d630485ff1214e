//! `uclearn` command-line front end.
//!
//! Settings are layered. Flags override an optional `--config` JSON object,
//! which overrides the built-in defaults. The resolved settings are written
//! next to every artifact so a run can be repeated exactly.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::analysis::{geometry_report, pca3_project, pca_csv};
use crate::augment::Defense;
use crate::baselines::{assign_by_labels, emaxn_generate, eminn_generate, predicted_labels, synper_generate, EmaxnConfig, EminnConfig};
use crate::clustering::save_cluster_model;
use crate::dataset::{load_dataset, save_dataset, synth_blobs, SynthConfig};
use crate::error::{Error, Result};
use crate::generator::{generate_unlearnable_clusters, GeneratorConfig, Metric};
use crate::harness::{perturb_test_set, run_cluster_sweep, run_relabel_experiment, train_target, write_reports};
use crate::io::{write_dir_atomic, write_file_atomic, write_json};
use crate::perturbation::{apply_perturbations, PerturbationSet};
use crate::surrogate::{
    extract_embeddings, load_pretrained_encoder, save_weights, surrogate_trainer_config, train_toy_surrogate, Surrogate,
};
use crate::train::TrainerConfig;

#[derive(Parser, Debug)]
#[command(name = "uclearn", version, about = "Cluster-wise unlearnable perturbations and their evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic pattern dataset (train and test splits).
    Synth(SynthArgs),
    /// Protect a dataset with cluster-wise or baseline noise.
    Protect(ProtectArgs),
    /// Train a target model and report its test accuracy.
    Eval(EvalArgs),
    /// Train targets on relabeled copies of a (protected) dataset.
    Relabel(RelabelArgs),
    /// Protect and evaluate for several cluster counts.
    Sweep(SweepArgs),
    /// Embedding geometry and PCA of clean versus perturbed data.
    Analyze(AnalyzeArgs),
}

/// Flags shared by every command.
#[derive(Args, Debug, Clone, Serialize)]
pub struct Common {
    /// JSON file with settings; flags given on the command line win.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Output directory (must not exist or be empty).
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long)]
    pub categories: Option<usize>,
    #[arg(long)]
    pub per_category: Option<usize>,
    #[arg(long)]
    pub test_per_category: Option<usize>,
    #[arg(long)]
    pub side: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthRun {
    pub seed: u64,
    pub categories: usize,
    pub per_category: usize,
    pub test_per_category: Option<usize>,
    pub side: usize,
}

impl Default for SynthRun {
    fn default() -> Self {
        Self {
            seed: 0,
            categories: 10,
            per_category: 500,
            test_per_category: None,
            side: 32,
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct ProtectArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Dataset directory to protect.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// uc, eminn, emaxn or synper.
    #[arg(long)]
    pub method: Option<String>,
    /// Number of clusters p (uc only).
    #[arg(long)]
    pub clusters: Option<usize>,
    /// L-infinity budget in units of 1/255.
    #[arg(long)]
    pub eps: Option<f32>,
    /// Generator epochs per cluster (uc).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// squared_euclidean or cosine_distance (uc).
    #[arg(long)]
    pub metric: Option<String>,
    /// Saved encoder (`UCWT` file); a toy surrogate is trained when absent.
    #[arg(long)]
    pub surrogate: Option<PathBuf>,
    /// Epochs for the toy surrogate.
    #[arg(long)]
    pub surrogate_epochs: Option<usize>,
    /// Patch side of the synthetic patterns (synper).
    #[arg(long)]
    pub patch_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtectRun {
    pub seed: u64,
    pub train: PathBuf,
    pub method: String,
    pub clusters: usize,
    pub eps: f32,
    pub epochs: usize,
    pub metric: String,
    pub surrogate: Option<PathBuf>,
    pub surrogate_epochs: usize,
    pub patch_size: usize,
}

impl Default for ProtectRun {
    fn default() -> Self {
        Self {
            seed: 0,
            train: PathBuf::new(),
            method: "uc".into(),
            clusters: 10,
            eps: 16.0,
            epochs: GeneratorConfig::default().epochs,
            metric: "squared_euclidean".into(),
            surrogate: None,
            surrogate_epochs: surrogate_trainer_config(0).epochs,
            patch_size: 8,
        }
    }
}

/// Target-training flags shared by the commands that train targets.
#[derive(Args, Debug, Clone, Serialize)]
pub struct TargetFlags {
    /// Target training epochs.
    #[arg(long)]
    pub target_epochs: Option<usize>,
    /// none, mixup, cutmix, cutout or gaussian_smooth.
    #[arg(long)]
    pub defense: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetRun {
    pub target_epochs: usize,
    pub defense: String,
}

impl Default for TargetRun {
    fn default() -> Self {
        Self {
            target_epochs: TrainerConfig::default().epochs,
            defense: "none".into(),
        }
    }
}

impl TargetRun {
    fn trainer(&self, seed: u64, side: usize) -> Result<TrainerConfig> {
        let defense =
            Defense::from_name(&self.defense, side).ok_or_else(|| Error::Config(format!("unknown defense {:?}", self.defense)))?;
        let config = TrainerConfig {
            epochs: self.target_epochs,
            seed,
            defense,
            ..TrainerConfig::default()
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub target: TargetFlags,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Cluster-wise perturbations used to build a perturbed test set.
    #[arg(long)]
    pub perturbations: Option<PathBuf>,
    /// Encoder the perturbation centers were computed with.
    #[arg(long)]
    pub encoder: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalRun {
    pub seed: u64,
    pub train: PathBuf,
    pub test: PathBuf,
    pub perturbations: Option<PathBuf>,
    pub encoder: Option<PathBuf>,
    #[serde(flatten)]
    pub target: TargetRun,
}

impl Default for EvalRun {
    fn default() -> Self {
        Self {
            seed: 0,
            train: PathBuf::new(),
            test: PathBuf::new(),
            perturbations: None,
            encoder: None,
            target: TargetRun::default(),
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct RelabelArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub target: TargetFlags,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Comma-separated class counts of the hacker's labels.
    #[arg(long, value_delimiter = ',')]
    pub n: Option<Vec<usize>>,
    /// Comma-separated target-training seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RelabelRun {
    /// Seed of the label grouping.
    pub seed: u64,
    pub train: PathBuf,
    pub test: PathBuf,
    pub n: Vec<usize>,
    pub seeds: Vec<u64>,
    #[serde(flatten)]
    pub target: TargetRun,
}

impl Default for RelabelRun {
    fn default() -> Self {
        Self {
            seed: 0,
            train: PathBuf::new(),
            test: PathBuf::new(),
            n: vec![2, 5, 10],
            seeds: vec![0],
            target: TargetRun::default(),
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub target: TargetFlags,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Comma-separated cluster counts.
    #[arg(long, value_delimiter = ',')]
    pub clusters: Option<Vec<usize>>,
    #[arg(long)]
    pub eps: Option<f32>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub surrogate: Option<PathBuf>,
    #[arg(long)]
    pub surrogate_epochs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepRun {
    pub seed: u64,
    pub train: PathBuf,
    pub test: PathBuf,
    pub clusters: Vec<usize>,
    pub eps: f32,
    pub epochs: usize,
    pub surrogate: Option<PathBuf>,
    pub surrogate_epochs: usize,
    #[serde(flatten)]
    pub target: TargetRun,
}

impl Default for SweepRun {
    fn default() -> Self {
        Self {
            seed: 0,
            train: PathBuf::new(),
            test: PathBuf::new(),
            clusters: vec![2, 5, 10, 20],
            eps: 16.0,
            epochs: GeneratorConfig::default().epochs,
            surrogate: None,
            surrogate_epochs: surrogate_trainer_config(0).epochs,
            target: TargetRun::default(),
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long)]
    pub clean: Option<PathBuf>,
    #[arg(long)]
    pub perturbed: Option<PathBuf>,
    /// Encoder whose embeddings are analyzed.
    #[arg(long)]
    pub encoder: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeRun {
    pub seed: u64,
    pub clean: PathBuf,
    pub perturbed: PathBuf,
    pub encoder: PathBuf,
}

impl Default for AnalyzeRun {
    fn default() -> Self {
        Self {
            seed: 0,
            clean: PathBuf::new(),
            perturbed: PathBuf::new(),
            encoder: PathBuf::new(),
        }
    }
}

/// Defaults, then the config file, then every flag that was given.
fn resolve<R: Serialize + DeserializeOwned + Default, F: Serialize>(flags: &F, config: Option<&Path>) -> Result<R> {
    let mut merged = serde_json::to_value(R::default())?;
    let target = merged.as_object_mut().expect("run settings serialize to an object");
    if let Some(path) = config {
        let file: serde_json::Value = crate::io::read_json(path).map_err(|e| Error::Config(e.to_string()))?;
        let obj = file
            .as_object()
            .ok_or_else(|| Error::Config(format!("{} must hold a JSON object", path.display())))?;
        target.extend(obj.clone());
    }
    if let serde_json::Value::Object(given) = serde_json::to_value(flags)? {
        target.extend(given.into_iter().filter(|(_, v)| !v.is_null()));
    }
    serde_json::from_value(merged).map_err(|e| Error::Config(format!("invalid settings: {e}")))
}

fn out_dir(common: &Common) -> Result<&Path> {
    common.out.as_deref().ok_or_else(|| Error::Config("--out is required".into()))
}

/// The flag must be given and name an existing path.
fn require(path: &Path, flag: &str) -> Result<()> {
    if path.as_os_str().is_empty() {
        Err(Error::Config(format!("--{flag} is required")))
    } else if !path.exists() {
        Err(Error::Config(format!("--{flag} {} does not exist", path.display())))
    } else {
        Ok(())
    }
}

fn require_optional(path: Option<&Path>, flag: &str) -> Result<()> {
    path.map_or(Ok(()), |p| require(p, flag))
}

/// Attach the resolved settings to every report.
fn stamp<R: Serialize>(reports: &mut [crate::harness::EvalReport], run: &R) -> Result<()> {
    let value = serde_json::to_value(run)?;
    for r in reports {
        r.run_config = Some(value.clone());
    }
    Ok(())
}

fn eps_from_255(eps: f32) -> Result<f32> {
    if !(0.0..255.0).contains(&eps) {
        return Err(Error::Config(format!(
            "--eps is in units of 1/255 and must lie in [0, 255), got {eps}"
        )));
    }
    Ok(eps / 255.0)
}

fn obtain_surrogate(path: Option<&Path>, train: &crate::dataset::LabeledImageDataset, epochs: usize, seed: u64) -> Result<Surrogate> {
    match path {
        Some(p) => load_pretrained_encoder(&p.to_string_lossy()),
        None => {
            let config = TrainerConfig {
                epochs,
                ..surrogate_trainer_config(seed)
            };
            Ok(train_toy_surrogate(train, &config)?.0)
        }
    }
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let run: SynthRun = resolve(args, args.common.config.as_deref())?;
    let out = out_dir(&args.common)?;
    let mut config = SynthConfig::new(run.categories, run.per_category, run.side, run.seed);
    if let Some(t) = run.test_per_category {
        config.test_per_category = t;
    }
    let split = synth_blobs(&config)?;
    write_dir_atomic(out, |dir| {
        save_dataset(&split.train, &dir.join("train"))?;
        save_dataset(&split.test, &dir.join("test"))?;
        write_json(&dir.join("run_config.json"), &run)
    })
}

pub fn cmd_protect(args: &ProtectArgs) -> Result<()> {
    let run: ProtectRun = resolve(args, args.common.config.as_deref())?;
    let out = out_dir(&args.common)?;
    if !["uc", "eminn", "emaxn", "synper"].contains(&run.method.as_str()) {
        return Err(Error::Config(format!("unknown method {:?}", run.method)));
    }
    if run.method == "uc" && run.clusters < 2 {
        return Err(Error::Config(format!("p must be >= 2, got {}", run.clusters)));
    }
    let eps = eps_from_255(run.eps)?;
    let metric = Metric::from_name(&run.metric).ok_or_else(|| Error::Config(format!("unknown metric {:?}", run.metric)))?;
    require(&run.train, "train")?;
    require_optional(run.surrogate.as_deref(), "surrogate")?;
    let train = load_dataset(&run.train)?;
    let (h, w) = train.image_size().ok_or_else(|| Error::Parameter("empty training set".into()))?;
    let surrogate = obtain_surrogate(run.surrogate.as_deref(), &train, run.surrogate_epochs, run.seed)?;

    let mut clusters = None;
    let mut set = match run.method.as_str() {
        "uc" => {
            let config = GeneratorConfig {
                eps,
                epochs: run.epochs,
                metric,
                seed: run.seed,
                ..GeneratorConfig::default()
            };
            let uc = generate_unlearnable_clusters(&train, &surrogate, run.clusters, &config)?;
            clusters = Some(uc.clusters);
            uc.set
        }
        method => {
            let labels = predicted_labels(&surrogate.net, &train);
            match method {
                "eminn" => {
                    let config = EminnConfig {
                        eps,
                        seed: run.seed,
                        ..EminnConfig::default()
                    };
                    eminn_generate(&train, &surrogate.net, &labels, &config)?
                }
                "emaxn" => emaxn_generate(
                    &train,
                    &surrogate.net,
                    &labels,
                    &EmaxnConfig {
                        eps,
                        ..EmaxnConfig::default()
                    },
                )?,
                _ => {
                    let patterns = synper_generate(surrogate.num_classes(), h, w, eps, run.patch_size, run.seed)?;
                    assign_by_labels(patterns, &train, &labels)?
                }
            }
        }
    };
    set.trailer.config = serde_json::json!({ "run": run, "method": set.trailer.config });
    let protected = apply_perturbations(&train, &set, None)?.with_name(format!("{}+{}", train.name, run.method));
    write_dir_atomic(out, |dir| {
        save_dataset(&protected, &dir.join("protected"))?;
        set.save(&dir.join("perturbations.ucpx"))?;
        if let Some(c) = &clusters {
            save_cluster_model(c, &dir.join("clusters.json"))?;
        }
        save_weights(&surrogate, &dir.join("surrogate.ucwt"))?;
        write_json(&dir.join("run_config.json"), &run)
    })
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let run: EvalRun = resolve(args, args.common.config.as_deref())?;
    let out = out_dir(&args.common)?;
    require(&run.train, "train")?;
    require(&run.test, "test")?;
    let train = load_dataset(&run.train)?;
    let test = load_dataset(&run.test)?;
    let side = train.image_size().map_or(32, |(h, _)| h);
    let trainer = run.target.trainer(run.seed, side)?;
    require_optional(run.perturbations.as_deref(), "perturbations")?;
    require_optional(run.encoder.as_deref(), "encoder")?;
    let perturbed_test = match (&run.perturbations, &run.encoder) {
        (Some(p), Some(e)) => {
            let set = PerturbationSet::load(p)?;
            let encoder = load_pretrained_encoder(&e.to_string_lossy())?;
            Some(perturb_test_set(&test, &set, &encoder)?)
        }
        (None, None) => None,
        _ => return Err(Error::Config("--perturbations and --encoder must be given together".into())),
    };
    let (mut report, _) = train_target(&train, &test, perturbed_test.as_ref(), &trainer)?;
    report.experiment = "eval".into();
    let mut reports = [report];
    stamp(&mut reports, &run)?;
    write_dir_atomic(out, |dir| {
        write_reports(dir, &reports)?;
        write_json(&dir.join("run_config.json"), &run)
    })
}

pub fn cmd_relabel(args: &RelabelArgs) -> Result<()> {
    let run: RelabelRun = resolve(args, args.common.config.as_deref())?;
    let out = out_dir(&args.common)?;
    require(&run.train, "train")?;
    require(&run.test, "test")?;
    let train = load_dataset(&run.train)?;
    let test = load_dataset(&run.test)?;
    let side = train.image_size().map_or(32, |(h, _)| h);
    let trainer = run.target.trainer(0, side)?;
    let rows = run_relabel_experiment(&train, &test, &run.n, &run.seeds, &trainer, run.seed)?;
    let mut reports: Vec<_> = rows.iter().map(|r| r.report.clone()).collect();
    stamp(&mut reports, &run)?;
    let table: Vec<_> = rows
        .iter()
        .map(|r| serde_json::json!({ "n": r.n, "seed": r.seed, "accuracy": r.accuracy, "chance": r.chance }))
        .collect();
    write_dir_atomic(out, |dir| {
        write_reports(dir, &reports)?;
        write_json(&dir.join("relabel.json"), &serde_json::json!({ "run": run, "rows": table }))?;
        write_json(&dir.join("run_config.json"), &run)
    })
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let run: SweepRun = resolve(args, args.common.config.as_deref())?;
    let out = out_dir(&args.common)?;
    require(&run.train, "train")?;
    require(&run.test, "test")?;
    if let Some(&p) = run.clusters.iter().find(|&&p| p < 2) {
        return Err(Error::Config(format!("p must be >= 2, got {p}")));
    }
    let eps = eps_from_255(run.eps)?;
    let train = load_dataset(&run.train)?;
    let test = load_dataset(&run.test)?;
    let side = train.image_size().map_or(32, |(h, _)| h);
    let trainer = run.target.trainer(run.seed, side)?;
    require_optional(run.surrogate.as_deref(), "surrogate")?;
    let surrogate = obtain_surrogate(run.surrogate.as_deref(), &train, run.surrogate_epochs, run.seed)?;
    let config = GeneratorConfig {
        eps,
        epochs: run.epochs,
        seed: run.seed,
        ..GeneratorConfig::default()
    };
    let rows = run_cluster_sweep(&train, &test, &surrogate, &run.clusters, &config, &trainer)?;
    let mut reports: Vec<_> = rows.iter().map(|r| r.report.clone()).collect();
    stamp(&mut reports, &run)?;
    let table: Vec<_> = rows
        .iter()
        .map(|r| serde_json::json!({ "p": r.p, "accuracy": r.accuracy, "perturbed_accuracy": r.perturbed_accuracy }))
        .collect();
    write_dir_atomic(out, |dir| {
        write_reports(dir, &reports)?;
        write_json(&dir.join("sweep.json"), &serde_json::json!({ "run": run, "rows": table }))?;
        write_json(&dir.join("run_config.json"), &run)
    })
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<()> {
    let run: AnalyzeRun = resolve(args, args.common.config.as_deref())?;
    let out = out_dir(&args.common)?;
    require(&run.clean, "clean")?;
    require(&run.perturbed, "perturbed")?;
    require(&run.encoder, "encoder")?;
    let clean = load_dataset(&run.clean)?;
    let perturbed = load_dataset(&run.perturbed)?;
    let encoder = load_pretrained_encoder(&run.encoder.to_string_lossy())?;
    let e_clean = extract_embeddings(&encoder, &clean, 256)?;
    let e_pert = extract_embeddings(&encoder, &perturbed, 256)?;
    let labels = clean.labels();
    let geometry = geometry_report(&e_clean, &e_pert, &labels)?;
    let pca_clean = pca_csv(e_clean.ids(), &labels, &pca3_project(&e_clean)?)?;
    let pca_pert = pca_csv(e_pert.ids(), &perturbed.labels(), &pca3_project(&e_pert)?)?;
    let categories: BTreeSet<usize> = labels.iter().copied().collect();
    log::info!(
        "{} categories: discrepancy ratio {:.3}, uniformity ratio {:.3}",
        categories.len(),
        geometry.discrepancy_ratio,
        geometry.uniformity_ratio
    );
    write_dir_atomic(out, |dir| {
        write_json(&dir.join("geometry.json"), &serde_json::json!({ "run": run, "geometry": geometry }))?;
        write_file_atomic(&dir.join("pca_clean.csv"), &pca_clean)?;
        write_file_atomic(&dir.join("pca_perturbed.csv"), &pca_pert)?;
        write_json(&dir.join("run_config.json"), &run)
    })
}

/// Caps rayon's pool at `UCLEARN_WORKERS` when set.
fn configure_workers() -> Result<()> {
    if let Ok(v) = std::env::var("UCLEARN_WORKERS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| Error::Config(format!("UCLEARN_WORKERS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot size the worker pool: {e}")))?;
    }
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    configure_workers()?;
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Protect(a) => cmd_protect(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Relabel(a) => cmd_relabel(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Analyze(a) => cmd_analyze(a),
    }
}

/// 0 on success, 2 for configuration errors, 3 for runtime failures.
pub fn exit_code(result: &Result<()>) -> ExitCode {
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is_config() => ExitCode::from(2),
        Err(_) => ExitCode::from(3),
    }
}

pub fn main_with_args(args: impl IntoIterator<Item = std::ffi::OsString>) -> ExitCode {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let result = execute(&cli);
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    exit_code(&result)
}
