//! Vary the number of clusters p and report target accuracy for each.
//! The per-run reports and a summary CSV go to a temporary directory.

use uclearn::dataset::{synth_blobs, SynthConfig};
use uclearn::generator::GeneratorConfig;
use uclearn::harness::{run_cluster_sweep, write_reports};
use uclearn::surrogate::{surrogate_trainer_config, train_toy_surrogate};
use uclearn::train::TrainerConfig;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> uclearn::error::Result<()> {
    let split = synth_blobs(&SynthConfig::new(5, 100, 16, 0))?;
    let (surrogate, _) = train_toy_surrogate(&split.train, &surrogate_trainer_config(1))?;
    let generator = GeneratorConfig {
        epochs: 5,
        ..GeneratorConfig::default()
    };
    let trainer = TrainerConfig {
        epochs: 4,
        ..TrainerConfig::default()
    };
    let rows = run_cluster_sweep(&split.train, &split.test, &surrogate, &[2, 5, 10], &generator, &trainer)?;
    for r in &rows {
        println!(
            "p = {:>2}: test accuracy {:.3}, perturbed test {:?}",
            r.p, r.accuracy, r.perturbed_accuracy
        );
    }
    let out = tempfile::tempdir().map_err(|e| uclearn::error::Error::Training(e.to_string()))?;
    let reports: Vec<_> = rows.into_iter().map(|r| r.report).collect();
    write_reports(out.path(), &reports)?;
    print!("{}", std::fs::read_to_string(out.path().join("summary.csv")).unwrap_or_default());
    Ok(())
}
