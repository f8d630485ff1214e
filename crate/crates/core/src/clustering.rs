//! K-means over embedding rows and the cyclic wrong-center permutation.
//!
//! Serialized as a JSON sidecar `{p, permutation, sizes, seed}` plus a
//! binary centers block: `p u32 | d u32 | p*d f32`, little-endian, row-major.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::surrogate::EmbeddingMatrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub p: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
    /// Independent k-means++ restarts; the lowest final inertia wins.
    pub n_init: usize,
}

impl KMeansConfig {
    pub fn new(p: usize, seed: u64) -> Self {
        Self {
            p,
            seed,
            max_iters: 300,
            tol: 1e-4,
            n_init: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModel {
    pub p: usize,
    pub dim: usize,
    /// `p x dim`, row-major.
    pub centers: Vec<f32>,
    /// Cluster index per fitted row.
    pub assignment: Vec<usize>,
    pub sizes: Vec<usize>,
    /// `permutation[i]` is the cluster whose center is cluster `i`'s target.
    pub permutation: Vec<usize>,
    pub seed: u64,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
}

impl ClusterModel {
    pub fn center(&self, i: usize) -> &[f32] {
        &self.centers[i * self.dim..(i + 1) * self.dim]
    }

    /// Center of the cluster that `i` is pushed towards.
    pub fn target_center(&self, i: usize) -> &[f32] {
        self.center(self.permutation[i])
    }

    pub fn inertia(&self) -> f64 {
        self.inertia_history.last().copied().unwrap_or(0.0)
    }
}

/// The closed-loop permutation `i -> (i + 1) mod p`.
pub fn cyclic_permutation(p: usize) -> Vec<usize> {
    (0..p).map(|i| (i + 1) % p).collect()
}

/// Target cluster per cluster, `g(i) = (i + 1) mod p`.
pub fn permute_centers(model: &ClusterModel) -> Vec<usize> {
    cyclic_permutation(model.p)
}

fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y) * (x as f64 - y)).sum()
}

/// Nearest center by squared Euclidean distance; ties go to the lowest index.
fn nearest(row: &[f32], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = sq_dist(row, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn kmeans_pp(e: &EmbeddingMatrix, p: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let k = e.rows();
    let to_f64 = |r: &[f32]| r.iter().map(|&v| v as f64).collect::<Vec<f64>>();
    let mut centers = vec![to_f64(e.row(rng.gen_range(0..k)))];
    let mut d2: Vec<f64> = (0..k).map(|i| sq_dist(e.row(i), &centers[0])).collect();
    while centers.len() < p {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut chosen = k - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && r < d {
                    chosen = i;
                    break;
                }
                r -= d;
            }
            // Guard against rounding landing on an already-chosen point.
            if d2[chosen] == 0.0 {
                chosen = (0..k).rev().find(|&i| d2[i] > 0.0).unwrap_or(chosen);
            }
            chosen
        } else {
            rng.gen_range(0..k)
        };
        let c = to_f64(e.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(e.row(i), &c));
        }
        centers.push(c);
    }
    centers
}

fn cluster_sizes(assignment: &[usize], p: usize) -> Vec<usize> {
    let mut sizes = vec![0usize; p];
    for &a in assignment {
        sizes[a] += 1;
    }
    sizes
}

/// Move every center to the mean of its rows; returns the largest shift.
fn update_means(e: &EmbeddingMatrix, assignment: &[usize], centers: &mut [Vec<f64>]) -> f64 {
    let d = e.dim();
    let p = centers.len();
    let mut sums = vec![vec![0f64; d]; p];
    let mut counts = vec![0usize; p];
    for (i, &a) in assignment.iter().enumerate() {
        counts[a] += 1;
        for (s, &v) in sums[a].iter_mut().zip(e.row(i)) {
            *s += v as f64;
        }
    }
    let mut shift = 0f64;
    for j in 0..p {
        if counts[j] == 0 {
            continue;
        }
        let new: Vec<f64> = sums[j].iter().map(|s| s / counts[j] as f64).collect();
        let moved = new.iter().zip(&centers[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        shift = shift.max(moved);
        centers[j] = new;
    }
    shift
}

struct Lloyd {
    centers: Vec<Vec<f64>>,
    assignment: Vec<usize>,
    history: Vec<f64>,
}

fn lloyd(e: &EmbeddingMatrix, mut centers: Vec<Vec<f64>>, max_iters: usize, tol: f64) -> Lloyd {
    let k = e.rows();
    let p = centers.len();
    let mut assignment = vec![0usize; k];
    let mut dists = vec![0f64; k];
    let mut history = Vec::new();
    let mut iters = 0;
    loop {
        for i in 0..k {
            let (j, dist) = nearest(e.row(i), &centers);
            assignment[i] = j;
            dists[i] = dist;
        }
        // Repair empty clusters by moving in the worst-fitting row.
        loop {
            let sizes = cluster_sizes(&assignment, p);
            let Some(empty) = sizes.iter().position(|&s| s == 0) else { break };
            let far = (0..k)
                .filter(|&i| sizes[assignment[i]] > 1)
                .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                .expect("p <= k leaves a multi-member cluster");
            centers[empty] = e.row(far).iter().map(|&v| v as f64).collect();
            assignment[far] = empty;
            dists[far] = 0.0;
        }
        history.push(dists.iter().sum::<f64>());

        let shift = update_means(e, &assignment, &mut centers);
        iters += 1;
        if shift < tol || iters >= max_iters {
            break;
        }
    }
    let final_inertia: f64 = (0..k).map(|i| sq_dist(e.row(i), &centers[assignment[i]])).sum();
    if final_inertia < *history.last().unwrap() {
        history.push(final_inertia);
    }
    Lloyd {
        centers,
        assignment,
        history,
    }
}

/// Lloyd's algorithm from k-means++ seeding, restarted `n_init` times.
///
/// Each run stops when no center moves more than `tol` (Euclidean) or after
/// `max_iters` rounds. A cluster that ends up empty is reseeded at the row
/// farthest from its own center. The run with the lowest final inertia is
/// kept (earliest on ties); its centers are the means of its assignment.
pub fn kmeans(e: &EmbeddingMatrix, config: &KMeansConfig) -> Result<ClusterModel> {
    let KMeansConfig {
        p,
        seed,
        max_iters,
        tol,
        n_init,
    } = *config;
    let k = e.rows();
    ensure!(p >= 1, Parameter, "p must be at least 1");
    ensure!(p <= k, Parameter, "cannot form {p} clusters from {k} rows");
    ensure!(max_iters >= 1, Parameter, "max_iters must be at least 1");
    ensure!(n_init >= 1, Parameter, "n_init must be at least 1");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<Lloyd> = None;
    for _ in 0..n_init {
        let run = lloyd(e, kmeans_pp(e, p, &mut rng), max_iters, tol);
        let better = best.as_ref().map_or(true, |b| run.history.last() < b.history.last());
        if better {
            best = Some(run);
        }
    }
    let Lloyd {
        centers,
        assignment,
        history,
    } = best.expect("n_init >= 1");
    let sizes = cluster_sizes(&assignment, p);

    Ok(ClusterModel {
        p,
        dim: e.dim(),
        centers: centers.iter().flatten().map(|&v| v as f32).collect(),
        assignment,
        sizes,
        permutation: cyclic_permutation(p),
        seed,
        inertia_history: history,
    })
}

/// Nearest-center index for each row of `e_new`.
pub fn assign(model: &ClusterModel, e_new: &EmbeddingMatrix) -> Result<Vec<usize>> {
    ensure!(
        e_new.dim() == model.dim,
        Parameter,
        "embedding width {} does not match cluster centers of width {}",
        e_new.dim(),
        model.dim
    );
    let centers: Vec<Vec<f64>> = (0..model.p).map(|j| model.center(j).iter().map(|&v| v as f64).collect()).collect();
    Ok(e_new.iter_rows().map(|r| nearest(r, &centers).0).collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    p: usize,
    permutation: Vec<usize>,
    sizes: Vec<usize>,
    seed: u64,
}

pub fn encode_centers(model: &ClusterModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + model.centers.len() * 4);
    out.extend_from_slice(&(model.p as u32).to_le_bytes());
    out.extend_from_slice(&(model.dim as u32).to_le_bytes());
    for v in &model.centers {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Write `<stem>.json` and `<stem>.bin` next to each other.
pub fn save_cluster_model(model: &ClusterModel, json_path: &Path) -> Result<()> {
    let sidecar = Sidecar {
        p: model.p,
        permutation: model.permutation.clone(),
        sizes: model.sizes.clone(),
        seed: model.seed,
    };
    crate::io::write_json(json_path, &sidecar)?;
    crate::io::write_file_atomic(&json_path.with_extension("bin"), &encode_centers(model))
}

/// Loads the sidecar and centers. The per-row assignment is not stored, so
/// the returned model has an empty `assignment`.
pub fn load_cluster_model(json_path: &Path) -> Result<ClusterModel> {
    let sidecar: Sidecar = crate::io::read_json(json_path)?;
    let bin_path = json_path.with_extension("bin");
    let bytes = std::fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    ensure!(bytes.len() >= 8, Format, "truncated centers file");
    let p = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    ensure!(
        p == sidecar.p,
        Format,
        "centers file holds {p} clusters, sidecar says {}",
        sidecar.p
    );
    ensure!(bytes.len() == 8 + p * dim * 4, Format, "centers file has the wrong length");
    ensure!(
        sidecar.permutation.len() == p && sidecar.sizes.len() == p,
        Format,
        "sidecar arrays do not match p = {p}"
    );
    let centers = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(ClusterModel {
        p,
        dim,
        centers,
        assignment: Vec::new(),
        sizes: sidecar.sizes,
        permutation: sidecar.permutation,
        seed: sidecar.seed,
        inertia_history: Vec::new(),
    })
}
