//! Protect a dataset with cluster-wise unlearnable noise: train a small
//! surrogate, cluster its embeddings, optimize one generator per cluster and
//! store the resulting perturbation set.
//!
//! `cargo run --example protect_uc -- [clusters] [generator_epochs]`

use uclearn::dataset::{synth_blobs, SynthConfig};
use uclearn::generator::{generate_unlearnable_clusters, GeneratorConfig};
use uclearn::perturbation::{apply_perturbations, PerturbationSet};
use uclearn::surrogate::{surrogate_trainer_config, train_toy_surrogate};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn arg(i: usize, default: usize) -> usize {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> uclearn::error::Result<()> {
    let p = arg(1, 5);
    let split = synth_blobs(&SynthConfig::new(5, 100, 16, 0))?;
    let (surrogate, history) = train_toy_surrogate(&split.train, &surrogate_trainer_config(1))?;
    println!("surrogate train accuracy {:.3}", history.last().map_or(0.0, |h| h.train_acc));

    let config = GeneratorConfig {
        epochs: arg(2, 5),
        ..GeneratorConfig::default()
    };
    let run = generate_unlearnable_clusters(&split.train, &surrogate, p, &config)?;
    println!("cluster sizes {:?}", run.clusters.sizes);
    for (i, t) in run.set.trailer.loss_traces.iter().enumerate() {
        println!(
            "cluster {i} -> target {}: loss {:.3} -> {:.3}",
            run.clusters.permutation[i], t.initial, t.last
        );
    }
    println!("largest |delta| = {:.5} (budget {:.5})", run.set.max_abs(), config.eps);

    let path = std::env::temp_dir().join("uclearn-uc.ucpx");
    run.set.save(&path)?;
    let back = PerturbationSet::load(&path)?;
    let protected = apply_perturbations(&split.train, &back, None)?;
    println!(
        "stored {} deltas at {}; protected {} images",
        back.len(),
        path.display(),
        protected.len()
    );
    Ok(())
}
