//! Generate the synthetic pattern dataset, store it on disk, load it back and
//! confirm that a linear classifier on raw pixels can learn it.
//!
//! `cargo run --example synth_dataset -- [out_dir]`

use std::path::PathBuf;

use uclearn::analysis::LinearProbe;
use uclearn::dataset::{load_dataset, save_dataset, synth_blobs, LabeledImageDataset, SynthConfig};
use uclearn::train::accuracy;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn pixels(ds: &LabeledImageDataset) -> Vec<f32> {
    ds.samples.iter().flat_map(|s| s.pixels.data().iter().copied()).collect()
}

fn main() -> uclearn::error::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("uclearn-synth"));
    let split = synth_blobs(&SynthConfig::new(10, 100, 16, 0))?;
    println!("train {} samples, test {} samples", split.train.len(), split.test.len());

    if out.exists() {
        std::fs::remove_dir_all(&out).ok();
    }
    save_dataset(&split.train, &out)?;
    let reloaded = load_dataset(&out)?;
    println!("stored at {} and reloaded {} samples", out.display(), reloaded.len());

    let dim = 16 * 16 * 3;
    let probe = LinearProbe::fit(&pixels(&reloaded), dim, &reloaded.labels(), 10, 1.0)?;
    let acc = accuracy(&probe.predict(&pixels(&split.test)), &split.test.labels());
    println!("least-squares probe on raw pixels: test accuracy {acc:.3}");
    Ok(())
}
