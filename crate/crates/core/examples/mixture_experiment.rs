//! Protect only some categories. The clean ones should train as well as they
//! would alone while the protected ones stay near chance.

use uclearn::dataset::{synth_blobs, SynthConfig};
use uclearn::generator::{generate_unlearnable_clusters, GeneratorConfig};
use uclearn::harness::run_mixture_experiment;
use uclearn::perturbation::apply_perturbations;
use uclearn::surrogate::{surrogate_trainer_config, train_toy_surrogate};
use uclearn::train::TrainerConfig;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> uclearn::error::Result<()> {
    let split = synth_blobs(&SynthConfig::new(6, 100, 16, 0))?;
    let (surrogate, _) = train_toy_surrogate(&split.train, &surrogate_trainer_config(1))?;
    let run = generate_unlearnable_clusters(
        &split.train,
        &surrogate,
        6,
        &GeneratorConfig {
            epochs: 8,
            ..GeneratorConfig::default()
        },
    )?;
    let protected = apply_perturbations(&split.train, &run.set, None)?;

    let trainer = TrainerConfig {
        epochs: 5,
        ..TrainerConfig::default()
    };
    for row in run_mixture_experiment(&split.train, &protected, &split.test, &[0, 3, 6], &trainer)? {
        println!(
            "{} clean categories: overall {:.3}, clean categories {:?}, protected categories {:?}, clean-only control {:?}",
            row.clean_count, row.overall_acc, row.clean_category_acc, row.protected_category_acc, row.control_acc
        );
    }
    Ok(())
}
