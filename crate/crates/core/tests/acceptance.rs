//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any criterion fails.
//!
//! Runs as a plain binary (`harness = false`) so the verdict lines are
//! always visible in the test log.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use uclearn::baselines::{assign_by_labels, emaxn_generate, eminn_generate, predicted_labels, synper_generate, EmaxnConfig, EminnConfig};
use uclearn::clustering::{kmeans, KMeansConfig};
use uclearn::dataset::{dequantize, quantize, synth_blobs, LabeledImageDataset, SynthConfig};
use uclearn::generator::{
    ddu_loss_grad, ddu_step_gradient, generate_delta, generate_unlearnable_clusters, GeneratorConfig, NoiseGenerator, UcRun,
};
use uclearn::harness::{perturb_test_set, run_mixture_experiment, run_relabel_experiment, train_target, EvalReport};
use uclearn::model::{ConvNet, ConvNetConfig};
use uclearn::perturbation::{apply_perturbations, PerturbationSet};
use uclearn::surrogate::{extract_embeddings, surrogate_trainer_config, train_toy_surrogate, EmbeddingMatrix, FeatureExtractor, Surrogate};
use uclearn::tensor::Tensor;
use uclearn::train::TrainerConfig;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const EPS: f32 = 16.0 / 255.0;
const CLUSTERS: usize = 10;
/// Target-model epochs used by every pipeline gate.
const TARGET_EPOCHS: usize = 8;
/// Generator epochs per cluster (the default for datasets of this size).
const GENERATOR_EPOCHS: usize = 50;
/// Target-training seeds; relabeling gates report the median over them.
const GATE_SEEDS: [u64; 3] = [0, 1, 2];
/// The hacker's grouping, fixed across training seeds.
const GROUPING_SEED: u64 = 7;

struct Verdicts {
    rows: Vec<(usize, bool)>,
}

impl Verdicts {
    fn record(&mut self, criterion: usize, pass: bool, started: Instant, detail: String) {
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {criterion}: {verdict} ({:.0}s) {detail}",
            started.elapsed().as_secs_f64()
        );
        self.rows.push((criterion, pass));
    }
}

struct Fixture {
    split_train: LabeledImageDataset,
    test: LabeledImageDataset,
    surrogate: Surrogate,
    trainer: TrainerConfig,
    uc: UcRun,
    protected: LabeledImageDataset,
    perturbed_test: LabeledImageDataset,
    clean_report: EvalReport,
    uc_report: EvalReport,
}

fn trainer(seed: u64) -> TrainerConfig {
    TrainerConfig {
        epochs: TARGET_EPOCHS,
        seed,
        ..TrainerConfig::default()
    }
}

fn build_fixture() -> Fixture {
    let split = synth_blobs(&SynthConfig::new(10, 500, 32, 0)).expect("synthetic data");
    let (surrogate, _) = train_toy_surrogate(&split.train, &surrogate_trainer_config(1)).expect("surrogate");
    let trainer = trainer(0);
    let (clean_report, _) = train_target(&split.train, &split.test, None, &trainer).expect("clean target");
    let config = GeneratorConfig {
        epochs: GENERATOR_EPOCHS,
        seed: 3,
        ..GeneratorConfig::default()
    };
    let uc = generate_unlearnable_clusters(&split.train, &surrogate, CLUSTERS, &config).expect("uc generation");
    let protected = apply_perturbations(&split.train, &uc.set, None).expect("protect");
    let perturbed_test = perturb_test_set(&split.test, &uc.set, &surrogate).expect("perturbed test");
    let (uc_report, _) = train_target(&protected, &split.test, Some(&perturbed_test), &trainer).expect("uc target");
    Fixture {
        split_train: split.train,
        test: split.test,
        surrogate,
        trainer,
        uc,
        protected,
        perturbed_test,
        clean_report,
        uc_report,
    }
}

fn criterion_1(f: &Fixture) -> (bool, String) {
    let clean = f.clean_report.clean_test_acc;
    let uc = f.uc_report.clean_test_acc;
    (
        clean >= 0.85 && uc <= 0.25,
        format!("clean-trained acc {clean:.4} (>= 0.85), UC-trained acc {uc:.4} (<= 0.25)"),
    )
}

/// Median relabeled accuracy per `n` over the training seeds, all under the
/// same hacker grouping.
fn relabeled_medians(f: &Fixture, protected: &LabeledImageDataset, n_values: &[usize]) -> Vec<(usize, f32)> {
    let rows = run_relabel_experiment(protected, &f.test, n_values, &GATE_SEEDS, &f.trainer, GROUPING_SEED).expect("relabel");
    n_values
        .iter()
        .map(|&n| (n, median(rows.iter().filter(|r| r.n == n).map(|r| r.accuracy).collect())))
        .collect()
}

fn criterion_2(f: &Fixture) -> (bool, String, f32) {
    let medians = relabeled_medians(f, &f.protected, &[2, 5, 10]);
    let pass = medians.iter().all(|&(n, acc)| acc - 1.0 / n as f32 <= 0.15);
    let detail = medians
        .iter()
        .map(|&(n, acc)| format!("n={n} acc {acc:.4} chance {:.4}", 1.0 / n as f32))
        .collect::<Vec<_>>()
        .join("; ");
    let at_five = medians.iter().find(|(n, _)| *n == 5).map(|&(_, a)| a).unwrap_or(f32::NAN);
    (pass, format!("median over seeds {GATE_SEEDS:?}: {detail}"), at_five)
}

/// Budget checks for one perturbation set and the dataset it protects.
fn budget_violations(set: &PerturbationSet, clean: &LabeledImageDataset, protected: &LabeledImageDataset) -> (usize, usize, usize) {
    let delta_bad = set.deltas.iter().flat_map(|d| d.data()).filter(|v| v.abs() > EPS).count();
    let mut range_bad = 0;
    let mut quant_bad = 0;
    for (c, p) in clean.samples.iter().zip(&protected.samples) {
        assert_eq!(c.id, p.id);
        for (&x, &y) in c.pixels.data().iter().zip(p.pixels.data()) {
            range_bad += usize::from(!(0.0..=1.0).contains(&y));
            quant_bad += usize::from((dequantize(quantize(y)) - x).abs() > 17.0 / 255.0);
        }
    }
    (delta_bad, range_bad, quant_bad)
}

fn criterion_3(f: &Fixture, baselines: &[(&str, PerturbationSet)]) -> (bool, String) {
    let mut pass = true;
    let mut parts = Vec::new();
    let uc_protected = f.protected.clone();
    let mut sets: Vec<(&str, &PerturbationSet, LabeledImageDataset)> = vec![("uc", &f.uc.set, uc_protected)];
    for (name, set) in baselines {
        sets.push((name, set, apply_perturbations(&f.split_train, set, None).expect("apply")));
    }
    for (name, set, protected) in &sets {
        let (d, r, q) = budget_violations(set, &f.split_train, protected);
        pass &= d == 0 && r == 0 && q == 0;
        parts.push(format!("{name}: {d} delta / {r} range / {q} quantization violations"));
    }
    let (d, r, q) = budget_violations(&f.uc.set, &f.test, &f.perturbed_test);
    pass &= d == 0 && r == 0 && q == 0;
    parts.push(format!("uc test: {d}/{r}/{q}"));
    (pass, parts.join("; "))
}

fn exhaustive_min_inertia(points: &[[f32; 2]]) -> f64 {
    let n = points.len();
    let mut best = f64::INFINITY;
    // Fix point 0 in cluster 0; every other split is a bitmask over the rest.
    for mask in 0u32..(1 << (n - 1)) {
        let mut groups: [Vec<[f32; 2]>; 2] = [vec![points[0]], vec![]];
        for (i, p) in points.iter().enumerate().skip(1) {
            groups[((mask >> (i - 1)) & 1) as usize].push(*p);
        }
        if groups[1].is_empty() {
            continue;
        }
        let sse: f64 = groups
            .iter()
            .map(|g| {
                let mx = g.iter().map(|p| p[0] as f64).sum::<f64>() / g.len() as f64;
                let my = g.iter().map(|p| p[1] as f64).sum::<f64>() / g.len() as f64;
                g.iter()
                    .map(|p| (p[0] as f64 - mx).powi(2) + (p[1] as f64 - my).powi(2))
                    .sum::<f64>()
            })
            .sum();
        best = best.min(sse);
    }
    best
}

fn criterion_4() -> (bool, String) {
    let mut matches = 0;
    let mut monotone = 0;
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let k = rng.gen_range(3..=8);
        let points: Vec<[f32; 2]> = (0..k).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        let rows: Vec<Vec<f32>> = points.iter().map(|p| p.to_vec()).collect();
        let e = EmbeddingMatrix::from_rows(&rows).expect("rows");
        let model = kmeans(&e, &KMeansConfig::new(2, trial)).expect("kmeans");
        let optimum = exhaustive_min_inertia(&points);
        if (model.inertia() - optimum).abs() <= 1e-5 * optimum.max(1e-6) {
            matches += 1;
        }
        if model.inertia_history.windows(2).all(|w| w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0)) {
            monotone += 1;
        }
    }
    (
        matches >= 95 && monotone == 100,
        format!("optimum matched in {matches}/100 (>= 95), monotone inertia in {monotone}/100"),
    )
}

fn squared_distance(a: &[f64], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, &y)| (x - y as f64).powi(2)).sum()
}

fn column_mean(e: &EmbeddingMatrix, rows: &[usize]) -> Vec<f64> {
    let mut mean = vec![0.0; e.dim()];
    for &r in rows {
        for (m, &v) in mean.iter_mut().zip(e.row(r)) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows.len() as f64);
    mean
}

/// Directional finite-difference check of the generator-parameter gradient
/// through a small convolutional encoder.
fn generator_gradient_check() -> (usize, usize, f64) {
    let config = GeneratorConfig {
        widths: vec![2],
        sigma_channels: 2,
        ..GeneratorConfig::default()
    };
    let encoder = Surrogate::new(
        ConvNet::new(
            ConvNetConfig {
                channels: vec![4],
                embed_dim: 6,
                num_classes: 3,
            },
            11,
        )
        .expect("encoder"),
        false,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let gen = NoiseGenerator::new(8, 8, &config, &mut rng).expect("generator");
    let sigma = gen.sample_sigma(&mut rng);
    let x = Tensor::from_vec([2, 3, 8, 8], (0..384).map(|_| rng.gen_range(0.2..0.8)).collect());
    let target: Vec<f32> = (0..6).map(|_| rng.gen_range(0.0..1.0)).collect();
    let (_, grads) = ddu_step_gradient(&gen, &sigma, &x, &target, &encoder, &config).expect("gradient");
    let loss_at = |g: &NoiseGenerator| -> f64 {
        let delta = generate_delta(g, &sigma, config.eps).expect("delta");
        let mut xd = x.clone();
        for i in 0..xd.batch() {
            for (v, d) in xd.item_mut(i).iter_mut().zip(delta.data()) {
                *v = (*v + d).clamp(0.0, 1.0);
            }
        }
        ddu_loss_grad(&encoder.embed(&xd), &target, config.metric).expect("loss").0
    };
    let h = 1e-3f32;
    let (mut checked, mut failed, mut worst) = (0, 0, 0.0f64);
    for probe in 0..24 {
        let mut prng = ChaCha8Rng::seed_from_u64(100 + probe);
        let dirs: Vec<Vec<f32>> = gen
            .net
            .params()
            .iter()
            .map(|b| b.iter().map(|_| prng.gen_range(-1.0..1.0)).collect())
            .collect();
        let shifted = |s: f32| {
            let mut g = gen.clone();
            for (block, dir) in g.net.params_mut().into_iter().zip(&dirs) {
                for (p, d) in block.iter_mut().zip(dir) {
                    *p += s * h * d;
                }
            }
            loss_at(&g)
        };
        let (fp, f0, fm) = (shifted(1.0), loss_at(&gen), shifted(-1.0));
        let (fwd, bwd) = ((fp - f0) / h as f64, (f0 - fm) / h as f64);
        // A ReLU or max-pool switch inside the step makes the one-sided slopes disagree.
        if (fwd - bwd).abs() > 1e-2 * fwd.abs().max(1e-1) {
            continue;
        }
        let fd = (fp - fm) / (2.0 * h as f64);
        // Slopes within 100x of the f32 rounding level of the loss carry no signal.
        if fd.abs() < 100.0 * f64::from(f32::EPSILON) * f0.abs() / h as f64 {
            continue;
        }
        let analytic: f64 = grads
            .iter()
            .zip(&dirs)
            .flat_map(|(g, d)| g.iter().zip(d))
            .map(|(&g, &d)| g as f64 * d as f64)
            .sum();
        let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-6);
        worst = worst.max(rel);
        checked += 1;
        failed += usize::from(rel > 1e-2);
    }
    (checked, failed, worst)
}

fn criterion_5(f: &Fixture) -> (bool, String) {
    let (checked, failed, worst) = generator_gradient_check();
    let grad_ok = checked >= 10 && failed == 0;
    let traces = &f.uc.set.trailer.loss_traces;
    let decreasing = traces.iter().filter(|t| t.last < t.initial).count();
    let ratio = traces.iter().map(|t| t.last / t.initial).fold(0.0f64, f64::max);
    let e_pert = extract_embeddings(&f.surrogate, &f.protected, 256).expect("embeddings");
    let mut closer = 0;
    let clusters = &f.uc.clusters;
    for c in 0..clusters.p {
        let rows: Vec<usize> = (0..clusters.assignment.len()).filter(|&r| clusters.assignment[r] == c).collect();
        let target = clusters.target_center(c);
        let before = squared_distance(&column_mean(&f.uc.embeddings, &rows), target);
        let after = squared_distance(&column_mean(&e_pert, &rows), target);
        closer += usize::from(after < before);
    }
    let pass = grad_ok && decreasing == traces.len() && closer == clusters.p;
    (
        pass,
        format!(
            "gradient: {checked} probes, {failed} over 1e-2 (worst {worst:.2e}); loss decreased in {decreasing}/{} clusters (worst final/initial {ratio:.3}); mean embedding closer to target in {closer}/{}",
            traces.len(),
            clusters.p
        ),
    )
}

fn criterion_6(f: &Fixture) -> (bool, String) {
    let clean = f.uc_report.clean_test_acc;
    let perturbed = f.uc_report.perturbed_test_acc.unwrap_or(0.0);
    (
        perturbed >= clean + 0.20,
        format!("perturbed-test acc {perturbed:.4} vs clean-test acc {clean:.4} (gap >= 0.20)"),
    )
}

fn criterion_7(f: &Fixture) -> (bool, String) {
    let rows = run_mixture_experiment(&f.split_train, &f.protected, &f.test, &[5], &f.trainer).expect("mixture");
    let row = &rows[0];
    let clean = row.clean_category_acc.unwrap_or(0.0);
    let control = row.control_acc.unwrap_or(1.0);
    let protected = row.protected_category_acc.unwrap_or(1.0);
    let chance = 1.0 / f.split_train.num_categories as f32;
    let pass = clean >= 0.8 * control && protected <= 2.0 * chance;
    (
        pass,
        format!(
            "clean categories {clean:.4} vs control {control:.4} (>= 0.8x); protected categories {protected:.4} (<= {:.2})",
            2.0 * chance
        ),
    )
}

fn median(mut v: Vec<f32>) -> f32 {
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

/// `uc` is the UC median at n = 5, already measured by criterion 2 under the
/// same seeds and groupings.
fn criterion_8(f: &Fixture, uc: f32, baselines: &[(&str, PerturbationSet)]) -> (bool, String) {
    let mut pass = true;
    let mut parts = vec![format!("uc {uc:.4}")];
    for (name, set) in baselines {
        let protected = apply_perturbations(&f.split_train, set, None).expect("apply");
        let acc = relabeled_medians(f, &protected, &[5])[0].1;
        pass &= uc <= acc;
        parts.push(format!("{name} {acc:.4}"));
    }
    (pass, format!("median n=5 accuracy over seeds {GATE_SEEDS:?}: {}", parts.join(", ")))
}

fn run_cli(args: &[&str], out: &Path) -> bool {
    let argv: Vec<OsString> = std::iter::once("uclearn".into())
        .chain(args.iter().map(OsString::from))
        .chain(["--out".into(), out.as_os_str().to_owned()])
        .collect();
    uclearn::cli::main_with_args(argv) == ExitCode::SUCCESS
}

fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).expect("read dir") {
            let path = entry.expect("entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                files.insert(rel, std::fs::read(&path).expect("read file"));
            }
        }
    }
    files
}

/// Every command, twice, in separate directories at a small scale.
fn pipeline_artifacts(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    let steps: Vec<(Vec<String>, &str)> = vec![
        (
            vec!["synth", "--categories", "4", "--per-category", "24", "--side", "16", "--seed", "5"]
                .into_iter()
                .map(String::from)
                .collect(),
            "data",
        ),
        (
            vec![
                "protect",
                "--train",
                &p("data/train"),
                "--clusters",
                "4",
                "--epochs",
                "2",
                "--surrogate-epochs",
                "2",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
            "uc",
        ),
        (
            vec![
                "protect",
                "--train",
                &p("data/train"),
                "--method",
                "eminn",
                "--surrogate",
                &p("uc/surrogate.ucwt"),
            ]
            .into_iter()
            .map(String::from)
            .collect(),
            "eminn",
        ),
        (
            vec![
                "protect",
                "--train",
                &p("data/train"),
                "--method",
                "emaxn",
                "--surrogate",
                &p("uc/surrogate.ucwt"),
            ]
            .into_iter()
            .map(String::from)
            .collect(),
            "emaxn",
        ),
        (
            vec![
                "protect",
                "--train",
                &p("data/train"),
                "--method",
                "synper",
                "--surrogate",
                &p("uc/surrogate.ucwt"),
            ]
            .into_iter()
            .map(String::from)
            .collect(),
            "synper",
        ),
        (
            vec![
                "eval",
                "--train",
                &p("uc/protected"),
                "--test",
                &p("data/test"),
                "--perturbations",
                &p("uc/perturbations.ucpx"),
                "--encoder",
                &p("uc/surrogate.ucwt"),
                "--target-epochs",
                "2",
                "--defense",
                "cutout",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
            "eval",
        ),
        (
            vec![
                "relabel",
                "--train",
                &p("uc/protected"),
                "--test",
                &p("data/test"),
                "--n",
                "2,4",
                "--seeds",
                "0,1",
                "--target-epochs",
                "1",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
            "relabel",
        ),
        (
            vec![
                "sweep",
                "--train",
                &p("data/train"),
                "--test",
                &p("data/test"),
                "--clusters",
                "2,3",
                "--epochs",
                "1",
                "--surrogate",
                &p("uc/surrogate.ucwt"),
                "--target-epochs",
                "1",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
            "sweep",
        ),
        (
            vec![
                "analyze",
                "--clean",
                &p("data/train"),
                "--perturbed",
                &p("uc/protected"),
                "--encoder",
                &p("uc/surrogate.ucwt"),
            ]
            .into_iter()
            .map(String::from)
            .collect(),
            "analyze",
        ),
    ];
    for (args, out) in &steps {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        assert!(run_cli(&args, &root.join(out)), "command {args:?} failed");
    }
    snapshot(root)
}

fn criterion_9() -> (bool, String) {
    // Artifacts echo their input paths, so both runs use the same location.
    let tmp = tempfile::tempdir().expect("tempdir");
    let root = tmp.path().join("run");
    let first = pipeline_artifacts(&root);
    std::fs::remove_dir_all(&root).expect("clear first run");
    let second = pipeline_artifacts(&root);
    let differing: Vec<&String> = first.keys().filter(|k| second.get(*k) != first.get(*k)).collect();
    let same_names = first.keys().eq(second.keys());
    (
        same_names && differing.is_empty(),
        format!(
            "{} artifact files from 9 commands, {} differ {:?}",
            first.len(),
            differing.len(),
            differing
        ),
    )
}

fn main() -> ExitCode {
    // Under `cargo test -- --list` or filters aimed at other targets, do nothing.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let mut v = Verdicts { rows: Vec::new() };

    let t = Instant::now();
    let (pass, detail) = criterion_4();
    v.record(4, pass, t, detail);

    let t = Instant::now();
    let (pass, detail) = criterion_9();
    v.record(9, pass, t, detail);

    let t = Instant::now();
    let f = build_fixture();
    println!(
        "fixture: surrogate, clean target, UC generation and UC target built in {:.0}s",
        t.elapsed().as_secs_f64()
    );
    let (pass, detail) = criterion_1(&f);
    v.record(1, pass, t, detail);

    let t = Instant::now();
    let (pass, detail) = criterion_6(&f);
    v.record(6, pass, t, detail);

    let t = Instant::now();
    let (pass, detail) = criterion_5(&f);
    v.record(5, pass, t, detail);

    let t = Instant::now();
    let (pass, detail, uc_at_five) = criterion_2(&f);
    v.record(2, pass, t, detail);

    let t = Instant::now();
    let (pass, detail) = criterion_7(&f);
    v.record(7, pass, t, detail);

    let t = Instant::now();
    let labels = predicted_labels(&f.surrogate.net, &f.split_train);
    let eminn = eminn_generate(
        &f.split_train,
        &f.surrogate.net,
        &labels,
        &EminnConfig {
            seed: 4,
            ..EminnConfig::default()
        },
    )
    .expect("eminn");
    let emaxn = emaxn_generate(&f.split_train, &f.surrogate.net, &labels, &EmaxnConfig::default()).expect("emaxn");
    let patterns = synper_generate(10, 32, 32, EPS, 8, 4).expect("synper");
    let synper = assign_by_labels(patterns, &f.split_train, &labels).expect("synper assignment");
    let baselines = [("eminn", eminn), ("emaxn", emaxn), ("synper", synper)];
    println!("baselines generated in {:.0}s", t.elapsed().as_secs_f64());
    let (pass, detail) = criterion_8(&f, uc_at_five, &baselines);
    v.record(8, pass, t, detail);

    let t = Instant::now();
    let (pass, detail) = criterion_3(&f, &baselines);
    v.record(3, pass, t, detail);

    v.rows.sort();
    let failed: Vec<usize> = v.rows.iter().filter(|(_, p)| !p).map(|(c, _)| *c).collect();
    println!("summary: {}/{} criteria passed", v.rows.len() - failed.len(), v.rows.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
