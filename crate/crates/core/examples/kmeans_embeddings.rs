//! Cluster surrogate embeddings with K-means and look at how clusters line
//! up with the true categories.

use uclearn::clustering::{kmeans, KMeansConfig};
use uclearn::dataset::{synth_blobs, SynthConfig};
use uclearn::surrogate::{extract_embeddings, surrogate_trainer_config, train_toy_surrogate};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> uclearn::error::Result<()> {
    let split = synth_blobs(&SynthConfig::new(6, 80, 16, 0))?;
    let (surrogate, _) = train_toy_surrogate(&split.train, &surrogate_trainer_config(1))?;
    let e = extract_embeddings(&surrogate, &split.train, 256)?;
    for p in [2, 6, 12] {
        let model = kmeans(&e, &KMeansConfig::new(p, 0))?;
        println!(
            "p = {p:>2}: inertia {:.2} after {} steps, sizes {:?}",
            model.inertia(),
            model.inertia_history.len(),
            model.sizes
        );
        let mut table = vec![vec![0usize; p]; 6];
        for (label, cluster) in split.train.labels().iter().zip(&model.assignment) {
            table[*label][*cluster] += 1;
        }
        if p == 6 {
            for (label, row) in table.iter().enumerate() {
                println!("  category {label}: {row:?}");
            }
        }
    }
    Ok(())
}
