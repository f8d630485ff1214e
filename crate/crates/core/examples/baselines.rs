//! The comparison methods: error-minimizing noise, error-maximizing noise
//! and class-wise synthetic patterns, all driven by the surrogate's
//! predicted labels. Prints how much each one moves the surrogate's loss.

use uclearn::baselines::{
    assign_by_labels, emaxn_generate, eminn_generate_with_model, mean_loss, predicted_labels, synper_generate, EmaxnConfig, EminnConfig,
};
use uclearn::dataset::{synth_blobs, SynthConfig};
use uclearn::surrogate::{surrogate_trainer_config, train_toy_surrogate};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> uclearn::error::Result<()> {
    let split = synth_blobs(&SynthConfig::new(5, 60, 16, 0))?;
    let train = &split.train;
    let (surrogate, _) = train_toy_surrogate(train, &surrogate_trainer_config(1))?;
    let net = &surrogate.net;
    let labels = predicted_labels(net, train);

    let (eminn, trained) = eminn_generate_with_model(
        train,
        net,
        &labels,
        &EminnConfig {
            max_rounds: 3,
            ..EminnConfig::default()
        },
    )?;
    let emaxn = emaxn_generate(train, net, &labels, &EmaxnConfig::default())?;
    let synper = assign_by_labels(synper_generate(5, 16, 16, 16.0 / 255.0, 4, 0)?, train, &labels)?;

    println!("surrogate loss, clean: {:.4}", mean_loss(net, train, &labels, None));
    for (name, set) in [
        ("error-minimizing", &eminn),
        ("error-maximizing", &emaxn),
        ("synthetic patterns", &synper),
    ] {
        println!(
            "{name:>18}: {} deltas, max |delta| {:.4}, surrogate loss {:.4}",
            set.len(),
            set.max_abs(),
            mean_loss(net, train, &labels, Some(set))
        );
    }
    // Error-minimizing noise is tuned against the copy it trains alongside.
    println!(
        "error-minimizing noise on its own trained copy: loss {:.4} clean, {:.4} perturbed",
        mean_loss(&trained, train, &labels, None),
        mean_loss(&trained, train, &labels, Some(&eminn))
    );
    Ok(())
}
