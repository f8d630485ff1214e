//! The label-agnostic setting: the data user groups the original categories
//! into `n` new labels before training. Accuracy on protected data should
//! stay near the 1/n chance level for every `n`.

use uclearn::dataset::{synth_blobs, SynthConfig};
use uclearn::generator::{generate_unlearnable_clusters, GeneratorConfig};
use uclearn::harness::run_relabel_experiment;
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
    let rows = run_relabel_experiment(&protected, &split.test, &[2, 3, 6], &[0], &trainer, 7)?;
    println!("{:>3} {:>9} {:>7}", "n", "accuracy", "chance");
    for r in rows {
        println!("{:>3} {:>9.3} {:>7.3}", r.n, r.accuracy, r.chance);
    }
    Ok(())
}
