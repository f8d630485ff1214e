//! Train target models on clean and on UC-protected data and compare their
//! test accuracy. The protected model is also scored on test images carrying
//! the cluster noise, where it does much better than on clean ones.

use uclearn::dataset::{synth_blobs, SynthConfig};
use uclearn::generator::{generate_unlearnable_clusters, GeneratorConfig};
use uclearn::harness::{perturb_test_set, train_target};
use uclearn::perturbation::apply_perturbations;
use uclearn::surrogate::{surrogate_trainer_config, train_toy_surrogate};
use uclearn::train::TrainerConfig;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> uclearn::error::Result<()> {
    let split = synth_blobs(&SynthConfig::new(5, 120, 16, 0))?;
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
    let perturbed_test = perturb_test_set(&split.test, &run.set, &surrogate)?;

    let trainer = TrainerConfig {
        epochs: 6,
        ..TrainerConfig::default()
    };
    let (clean, _) = train_target(&split.train, &split.test, None, &trainer)?;
    let (uc, _) = train_target(&protected, &split.test, Some(&perturbed_test), &trainer)?;
    println!("clean-trained target: test accuracy {:.3}", clean.clean_test_acc);
    println!("UC-trained target:    test accuracy {:.3}", uc.clean_test_acc);
    println!(
        "UC-trained target on perturbed test images: {:.3}",
        uc.perturbed_test_acc.unwrap_or(f32::NAN)
    );
    println!("per-epoch clean test accuracy of the UC model: {:?}", uc.clean_test_curve);
    Ok(())
}
