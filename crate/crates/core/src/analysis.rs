//! Embedding geometry: PCA projections, discrepancy/uniformity scores and
//! a least-squares linear probe.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::nn::argmax;
use crate::surrogate::EmbeddingMatrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pca3 {
    /// `k` rows of up to three coordinates.
    pub coords: Vec<Vec<f64>>,
    /// Fraction of total variance per kept component, descending.
    pub explained: Vec<f64>,
    /// Unit loading vectors of the kept components.
    pub components: Vec<Vec<f64>>,
    /// Set when the data has fewer than three non-degenerate directions.
    pub rank_deficient: bool,
}

fn to_matrix(e: &EmbeddingMatrix) -> DMatrix<f64> {
    DMatrix::from_row_iterator(e.rows(), e.dim(), e.data().iter().map(|&v| v as f64))
}

/// Project mean-centered rows onto the top three covariance eigenvectors.
/// Each component's first non-negligible loading is made positive.
pub fn pca3_project(e: &EmbeddingMatrix) -> Result<Pca3> {
    let (k, d) = (e.rows(), e.dim());
    ensure!(k >= 4, Parameter, "PCA needs at least 4 rows, got {k}");
    ensure!(d >= 3, Parameter, "PCA needs at least 3 columns, got {d}");
    let mut x = to_matrix(e);
    let mean = x.row_mean();
    for mut row in x.row_iter_mut() {
        row -= &mean;
    }
    let cov = (x.transpose() * &x) / (k as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let floor = 1e-10 * eig.eigenvalues[order[0]].abs().max(f64::MIN_POSITIVE);
    let kept: Vec<usize> = order.into_iter().take(3).filter(|&j| eig.eigenvalues[j] > floor).collect();

    let components: Vec<Vec<f64>> = kept
        .iter()
        .map(|&j| {
            let mut v: Vec<f64> = eig.eigenvectors.column(j).iter().copied().collect();
            if let Some(first) = v.iter().copied().find(|c| c.abs() > 1e-12) {
                if first < 0.0 {
                    v.iter_mut().for_each(|c| *c = -*c);
                }
            }
            v
        })
        .collect();
    let coords = x
        .row_iter()
        .map(|row| components.iter().map(|c| row.iter().zip(c).map(|(a, b)| a * b).sum()).collect())
        .collect();
    Ok(Pca3 {
        coords,
        explained: kept
            .iter()
            .map(|&j| if total > 0.0 { eig.eigenvalues[j] / total } else { 0.0 })
            .collect(),
        rank_deficient: kept.len() < 3,
        components,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryScores {
    /// Mean over categories of the covariance trace of their embeddings.
    pub discrepancy: f64,
    /// Mean pairwise Euclidean distance between unit-normalized embeddings.
    pub uniformity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryGeometry {
    pub category: usize,
    pub count: usize,
    pub discrepancy_clean: f64,
    pub discrepancy_perturbed: f64,
    pub mean_shift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub clean: GeometryScores,
    pub perturbed: GeometryScores,
    /// Perturbed over clean; 1 when both are zero.
    pub discrepancy_ratio: f64,
    pub uniformity_ratio: f64,
    /// Distance between the clean and perturbed embedding means.
    pub mean_shift: f64,
    pub per_category: Vec<CategoryGeometry>,
    /// Categories with fewer than two samples, left out of the discrepancy.
    pub excluded_categories: Vec<usize>,
}

fn mean_of(e: &EmbeddingMatrix, rows: &[usize]) -> Vec<f64> {
    let mut m = vec![0.0; e.dim()];
    for &i in rows {
        for (a, &v) in m.iter_mut().zip(e.row(i)) {
            *a += v as f64;
        }
    }
    m.iter_mut().for_each(|a| *a /= rows.len().max(1) as f64);
    m
}

/// Trace of the population covariance of the selected rows.
fn covariance_trace(e: &EmbeddingMatrix, rows: &[usize]) -> f64 {
    let mean = mean_of(e, rows);
    let ss: f64 = rows
        .iter()
        .map(|&i| e.row(i).iter().zip(&mean).map(|(&v, m)| (v as f64 - m).powi(2)).sum::<f64>())
        .sum();
    ss / rows.len() as f64
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Mean pairwise distance between unit-normalized rows. Zero rows stay zero.
pub fn uniformity(e: &EmbeddingMatrix) -> f64 {
    let unit: Vec<Vec<f64>> = e
        .iter_rows()
        .map(|r| {
            let n = r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            r.iter().map(|&v| if n > 0.0 { v as f64 / n } else { 0.0 }).collect()
        })
        .collect();
    let k = unit.len();
    if k < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            total += distance(&unit[i], &unit[j]);
        }
    }
    total / (k * (k - 1) / 2) as f64
}

fn ratio(perturbed: f64, clean: f64) -> f64 {
    if clean == 0.0 && perturbed == 0.0 {
        1.0
    } else {
        perturbed / clean
    }
}

pub fn geometry_report(clean: &EmbeddingMatrix, perturbed: &EmbeddingMatrix, labels: &[usize]) -> Result<GeometryReport> {
    ensure!(
        clean.ids() == perturbed.ids(),
        Parameter,
        "clean and perturbed embeddings are not aligned"
    );
    ensure!(clean.dim() == perturbed.dim(), Parameter, "embedding widths differ");
    ensure!(
        labels.len() == clean.rows(),
        Parameter,
        "expected {} labels, got {}",
        clean.rows(),
        labels.len()
    );
    let categories = labels.iter().max().map_or(0, |&m| m + 1);
    let mut per_category = Vec::new();
    let mut excluded = Vec::new();
    for c in 0..categories {
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if rows.is_empty() {
            continue;
        }
        if rows.len() < 2 {
            excluded.push(c);
            continue;
        }
        per_category.push(CategoryGeometry {
            category: c,
            count: rows.len(),
            discrepancy_clean: covariance_trace(clean, &rows),
            discrepancy_perturbed: covariance_trace(perturbed, &rows),
            mean_shift: distance(&mean_of(clean, &rows), &mean_of(perturbed, &rows)),
        });
    }
    let mean_disc = |f: fn(&CategoryGeometry) -> f64| {
        if per_category.is_empty() {
            0.0
        } else {
            per_category.iter().map(f).sum::<f64>() / per_category.len() as f64
        }
    };
    let clean_scores = GeometryScores {
        discrepancy: mean_disc(|c| c.discrepancy_clean),
        uniformity: uniformity(clean),
    };
    let perturbed_scores = GeometryScores {
        discrepancy: mean_disc(|c| c.discrepancy_perturbed),
        uniformity: uniformity(perturbed),
    };
    let all: Vec<usize> = (0..labels.len()).collect();
    Ok(GeometryReport {
        discrepancy_ratio: ratio(perturbed_scores.discrepancy, clean_scores.discrepancy),
        uniformity_ratio: ratio(perturbed_scores.uniformity, clean_scores.uniformity),
        mean_shift: distance(&mean_of(clean, &all), &mean_of(perturbed, &all)),
        clean: clean_scores,
        perturbed: perturbed_scores,
        per_category,
        excluded_categories: excluded,
    })
}

/// Ridge least-squares classifier on one-hot targets.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    /// `(dim + 1) x classes`; the last row is the bias.
    pub weights: DMatrix<f64>,
}

impl LinearProbe {
    /// Fit on `rows` (`len / dim` rows of width `dim`).
    pub fn fit(rows: &[f32], dim: usize, labels: &[usize], classes: usize, ridge: f64) -> Result<Self> {
        ensure!(dim >= 1 && rows.len() == labels.len() * dim, Parameter, "rows do not match labels");
        ensure!(labels.iter().all(|&l| l < classes), Parameter, "label outside {classes} classes");
        let k = labels.len();
        let x = DMatrix::from_fn(k, dim + 1, |i, j| if j == dim { 1.0 } else { rows[i * dim + j] as f64 });
        let y = DMatrix::from_fn(k, classes, |i, c| f64::from(u8::from(labels[i] == c)));
        let mut gram = x.transpose() * &x;
        for j in 0..dim {
            gram[(j, j)] += ridge;
        }
        let rhs = x.transpose() * y;
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::Numeric("normal equations are not positive definite; increase the ridge".into()))?;
        Ok(Self { weights: chol.solve(&rhs) })
    }

    pub fn predict(&self, rows: &[f32]) -> Vec<usize> {
        let dim = self.weights.nrows() - 1;
        rows.chunks(dim)
            .map(|r| {
                let scores: Vec<f32> = (0..self.weights.ncols())
                    .map(|c| {
                        let w = self.weights.column(c);
                        (r.iter().enumerate().map(|(j, &v)| v as f64 * w[j]).sum::<f64>() + w[dim]) as f32
                    })
                    .collect();
                argmax(&scores)
            })
            .collect()
    }
}

/// Write PCA coordinates as `id,label,c1,c2,c3`.
pub fn pca_csv(ids: &[String], labels: &[usize], pca: &Pca3) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Format(format!("csv: {e}"));
    w.write_record(["id", "label", "c1", "c2", "c3"]).map_err(err)?;
    for ((id, label), c) in ids.iter().zip(labels).zip(&pca.coords) {
        let mut rec = vec![id.clone(), label.to_string()];
        rec.extend((0..3).map(|j| c.get(j).map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(&rec).map_err(err)?;
    }
    w.into_inner().map_err(|e| err(e.into_error().into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rows(k: usize, d: usize, seed: u64) -> Vec<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..k).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn pca_on_centered_3d_data_preserves_distances() {
        let mut rows = random_rows(12, 3, 1);
        let mean: Vec<f32> = (0..3).map(|j| rows.iter().map(|r| r[j]).sum::<f32>() / 12.0).collect();
        rows.iter_mut().for_each(|r| r.iter_mut().zip(&mean).for_each(|(v, m)| *v -= m));
        let pca = pca3_project(&EmbeddingMatrix::from_rows(&rows).unwrap()).unwrap();
        assert!(!pca.rank_deficient);
        for i in 0..12 {
            for j in 0..12 {
                let orig: f64 = (0..3).map(|t| (rows[i][t] as f64 - rows[j][t] as f64).powi(2)).sum::<f64>().sqrt();
                let proj = distance(&pca.coords[i], &pca.coords[j]);
                assert!((orig - proj).abs() < 1e-6);
            }
        }
        assert!(pca.explained.windows(2).all(|w| w[0] >= w[1]));
        assert!(pca.explained.iter().sum::<f64>() <= 1.0 + 1e-12);
    }

    #[test]
    fn rank_deficient_data_is_flagged() {
        let rows: Vec<Vec<f32>> = (0..6).map(|i| vec![i as f32, 2.0 * i as f32, 0.0, 0.0]).collect();
        let pca = pca3_project(&EmbeddingMatrix::from_rows(&rows).unwrap()).unwrap();
        assert!(pca.rank_deficient);
        assert_eq!(pca.explained.len(), 1);
    }

    #[test]
    fn identical_embeddings_give_unit_ratios() {
        let e = EmbeddingMatrix::from_rows(&random_rows(10, 4, 2)).unwrap();
        let labels: Vec<usize> = (0..10).map(|i| i % 3).collect();
        let r = geometry_report(&e, &e, &labels).unwrap();
        assert_eq!(r.discrepancy_ratio, 1.0);
        assert_eq!(r.uniformity_ratio, 1.0);
        assert_eq!(r.mean_shift, 0.0);
    }

    #[test]
    fn collapsed_category_has_zero_discrepancy_and_singletons_are_excluded() {
        let mut rows = random_rows(7, 3, 3);
        for i in 0..3 {
            rows[i] = vec![0.5, 0.5, 0.5];
        }
        let labels = vec![0, 0, 0, 1, 1, 1, 2];
        let e = EmbeddingMatrix::from_rows(&rows).unwrap();
        let r = geometry_report(&e, &e, &labels).unwrap();
        assert_eq!(r.per_category[0].discrepancy_clean, 0.0);
        assert_eq!(r.excluded_categories, vec![2]);
    }

    #[test]
    fn linear_probe_separates_separable_data() {
        let rows: Vec<f32> = vec![0.0, 0.0, 0.1, 0.0, 1.0, 1.0, 0.9, 1.0];
        let labels = vec![0, 0, 1, 1];
        let probe = LinearProbe::fit(&rows, 2, &labels, 2, 1e-6).unwrap();
        assert_eq!(probe.predict(&rows), labels);
    }
}
