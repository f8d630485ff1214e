//! Property suites over the data structures and invariants that every run
//! relies on.

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use uclearn::clustering::{kmeans, KMeansConfig};
use uclearn::dataset::{dequantize, make_grouping, quantize, relabel, Image, ImageSample, LabeledImageDataset};
use uclearn::generator::{generate_delta, GeneratorConfig, NoiseGenerator};
use uclearn::perturbation::{apply_perturbations, NoiseMode, PerturbationSet, Trailer};
use uclearn::surrogate::EmbeddingMatrix;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const SIDE: usize = 4;
const ITEM: usize = SIDE * SIDE * 3;

fn dataset(pixels: &[Vec<f32>], labels: &[usize], categories: usize) -> LabeledImageDataset {
    let samples = pixels
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (p, &label))| ImageSample {
            id: format!("s{i:03}"),
            label,
            pixels: Image::new(SIDE, SIDE, p.clone()).unwrap(),
        })
        .collect();
    LabeledImageDataset::new("prop", categories, 0, samples).unwrap()
}

fn cluster_set(deltas: &[Vec<f32>], eps: f32, assignment: &[usize]) -> PerturbationSet {
    PerturbationSet {
        mode: NoiseMode::Cluster,
        eps,
        height: SIDE,
        width: SIDE,
        deltas: deltas.iter().map(|d| Image::new(SIDE, SIDE, d.clone()).unwrap()).collect(),
        trailer: Trailer {
            assignment: assignment
                .iter()
                .enumerate()
                .map(|(i, &c)| (format!("s{i:03}"), c))
                .collect::<BTreeMap<_, _>>(),
            ..Trailer::default()
        },
    }
}

prop_compose! {
    fn perturbation_case()(eps in 0.0f32..0.5, p in 1usize..4, k in 1usize..6)
        (deltas in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, ITEM), p),
         images in prop::collection::vec(prop::collection::vec(0.0f32..=1.0, ITEM), k),
         assignment in prop::collection::vec(0..p, k),
         eps in Just(eps))
        -> (f32, Vec<Vec<f32>>, Vec<Vec<f32>>, Vec<usize>) {
        let scaled = deltas.iter().map(|d| d.iter().map(|v| v * eps).collect()).collect();
        (eps, scaled, images, assignment)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn protected_pixels_stay_in_range_and_budget((eps, deltas, images, assignment) in perturbation_case()) {
        let ds = dataset(&images, &vec![0; images.len()], 1);
        let set = cluster_set(&deltas, eps, &assignment);
        let out = apply_perturbations(&ds, &set, None).unwrap();
        for (clean, prot) in ds.samples.iter().zip(&out.samples) {
            prop_assert_eq!(&clean.id, &prot.id);
            for (&x, &y) in clean.pixels.data().iter().zip(prot.pixels.data()) {
                prop_assert!((0.0..=1.0).contains(&y));
                prop_assert!((y - x).abs() <= eps);
                prop_assert!((dequantize(quantize(y)) - x).abs() <= eps + 1.0 / 255.0);
            }
        }
    }

    #[test]
    fn container_round_trips((eps, deltas, _images, assignment) in perturbation_case()) {
        let set = cluster_set(&deltas, eps, &assignment);
        let bytes = set.encode().unwrap();
        let back = PerturbationSet::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &set);
        prop_assert_eq!(back.encode().unwrap(), bytes);
    }

    #[test]
    fn quantization_error_is_at_most_half_a_level(v in 0.0f32..=1.0) {
        prop_assert!((dequantize(quantize(v)) - v).abs() <= 0.5 / 255.0 + 1e-7);
    }

    #[test]
    fn grouping_is_balanced_surjective_and_seeded(m in 2usize..40, n_frac in 0.0f64..1.0, seed: u64) {
        let n = 1 + ((m - 1) as f64 * n_frac) as usize;
        let g = make_grouping(m, n, seed).unwrap();
        g.validate().unwrap();
        let sizes = g.group_sizes();
        prop_assert_eq!(sizes.iter().sum::<usize>(), m);
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert_eq!(g, make_grouping(m, n, seed).unwrap());
    }

    #[test]
    fn relabel_keeps_ids_and_pixels(labels in prop::collection::vec(0usize..6, 1..12), seed: u64) {
        let images: Vec<Vec<f32>> = (0..labels.len()).map(|i| vec![i as f32 / 20.0; ITEM]).collect();
        let ds = dataset(&images, &labels, 6);
        let mapping = make_grouping(6, 3, seed).unwrap();
        let out = relabel(&ds, &mapping).unwrap();
        prop_assert_eq!(out.num_categories, 3);
        for (a, b) in ds.samples.iter().zip(&out.samples) {
            prop_assert_eq!(&a.id, &b.id);
            prop_assert_eq!(&a.pixels, &b.pixels);
            prop_assert_eq!(mapping.table[a.label], b.label);
        }
    }

    #[test]
    fn kmeans_assigns_every_row_to_its_nearest_center(
        rows in prop::collection::vec(prop::collection::vec(-5.0f32..5.0, 3), 4..40),
        p in 1usize..4,
        seed: u64,
    ) {
        let e = EmbeddingMatrix::from_rows(&rows).unwrap();
        let model = kmeans(&e, &KMeansConfig::new(p, seed)).unwrap();
        prop_assert_eq!(model.sizes.iter().sum::<usize>(), rows.len());
        prop_assert!(model.sizes.iter().all(|&s| s > 0));
        prop_assert!(model.inertia_history.windows(2).all(|w| w[1] <= w[0] + 1e-6 * w[0].max(1.0)));
        let dist = |r: &[f32], c: usize| -> f64 {
            r.iter().zip(model.center(c)).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum()
        };
        for (i, r) in rows.iter().enumerate() {
            let own = dist(r, model.assignment[i]);
            for c in 0..p {
                prop_assert!(own <= dist(r, c) + 1e-4, "row {} prefers cluster {}", i, c);
            }
        }
        prop_assert_eq!(model.permutation, (0..p).map(|i| (i + 1) % p).collect::<Vec<_>>());
    }

    #[test]
    fn generated_delta_never_exceeds_the_budget(eps in 0.0f32..0.5, seed: u64) {
        let config = GeneratorConfig { eps, widths: vec![2], ..GeneratorConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gen = NoiseGenerator::new(4, 4, &config, &mut rng).unwrap();
        let sigma = gen.sample_sigma(&mut rng);
        let delta = generate_delta(&gen, &sigma, eps).unwrap();
        prop_assert!(delta.data().iter().all(|v| v.abs() <= eps));
        prop_assert_eq!(delta, generate_delta(&gen, &sigma, eps).unwrap());
    }
}
