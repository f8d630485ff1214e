//! Embedding geometry before and after protection. Prints the geometry
//! scores and exports a 3-D PCA projection as CSV.

use uclearn::analysis::{geometry_report, pca3_project, pca_csv};
use uclearn::dataset::{synth_blobs, SynthConfig};
use uclearn::generator::{generate_unlearnable_clusters, GeneratorConfig};
use uclearn::perturbation::apply_perturbations;
use uclearn::surrogate::{extract_embeddings, surrogate_trainer_config, train_toy_surrogate};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> uclearn::error::Result<()> {
    let split = synth_blobs(&SynthConfig::new(5, 80, 16, 0))?;
    let (surrogate, _) = train_toy_surrogate(&split.train, &surrogate_trainer_config(1))?;
    let run = generate_unlearnable_clusters(
        &split.train,
        &surrogate,
        5,
        &GeneratorConfig {
            epochs: 8,
            ..GeneratorConfig::default()
        },
    )?;
    let protected = apply_perturbations(&split.train, &run.set, None)?;

    let clean = extract_embeddings(&surrogate, &split.train, 256)?;
    let perturbed = extract_embeddings(&surrogate, &protected, 256)?;
    let report = geometry_report(&clean, &perturbed, &split.train.labels())?;
    println!(
        "discrepancy {:.4} -> {:.4} (ratio {:.3})",
        report.clean.discrepancy, report.perturbed.discrepancy, report.discrepancy_ratio
    );
    println!(
        "uniformity  {:.4} -> {:.4} (ratio {:.3})",
        report.clean.uniformity, report.perturbed.uniformity, report.uniformity_ratio
    );
    println!("mean shift {:.4}", report.mean_shift);

    let pca = pca3_project(&perturbed)?;
    println!("explained variance of the first three components: {:?}", pca.explained);
    let csv = pca_csv(perturbed.ids(), &protected.labels(), &pca)?;
    let text = String::from_utf8_lossy(&csv);
    for line in text.lines().take(4) {
        println!("{line}");
    }
    Ok(())
}
