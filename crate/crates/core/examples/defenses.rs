//! Train the target with each training-time defense (mixup, cutmix, cutout,
//! gaussian smoothing) on UC-protected data.

use uclearn::augment::Defense;
use uclearn::dataset::{synth_blobs, SynthConfig};
use uclearn::generator::{generate_unlearnable_clusters, GeneratorConfig};
use uclearn::harness::train_target;
use uclearn::perturbation::apply_perturbations;
use uclearn::surrogate::{surrogate_trainer_config, train_toy_surrogate};
use uclearn::train::TrainerConfig;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> uclearn::error::Result<()> {
    let split = synth_blobs(&SynthConfig::new(5, 100, 16, 0))?;
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
    for name in ["none", "mixup", "cutmix", "cutout", "gaussian_smooth"] {
        let defense = Defense::from_name(name, 16).expect("known defense");
        let trainer = TrainerConfig {
            epochs: 4,
            defense,
            ..TrainerConfig::default()
        };
        let (report, _) = train_target(&protected, &split.test, None, &trainer)?;
        println!("{name:>16}: test accuracy {:.3}", report.clean_test_acc);
    }
    Ok(())
}
