//! Phenotype clustering over visual features and the cluster-consistency
//! regularizer on predicted per-cell expression.
//!
//! Fitting is k-means++ seeded Lloyd iteration, fully deterministic per
//! seed. The objective is the per-cluster mean of squared distances
//! summed over clusters (not plain WCSS); its trajectory is recorded per
//! iteration so tests can assert monotone descent.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct PhenotypeModel {
    pub k: usize,
    /// K×D centroids in feature space.
    pub centroids: Tensor,
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &Tensor, point: &[f64]) -> usize {
    let (k, _) = centroids.dims2().expect("centroids are 2-D");
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for c in 0..k {
        let d = dist_sq(centroids.row(c), point);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// Within-cluster sum of squares against member means; the quantity
/// every Lloyd step is guaranteed not to increase. (The size-normalized
/// spread that the consistency loss penalizes lives in `cluster_loss`
/// and is not Lloyd-monotone: reassignment moves the 1/|S_k| weights.)
fn objective(h: &Tensor, labels: &[usize], k: usize) -> f64 {
    let (n, d) = h.dims2().expect("points are 2-D");
    let mut sums = vec![0.0; k * d];
    let mut counts = vec![0usize; k];
    for i in 0..n {
        counts[labels[i]] += 1;
        for j in 0..d {
            sums[labels[i] * d + j] += h.at2(i, j);
        }
    }
    let mut total = 0.0;
    for c in 0..k {
        if counts[c] == 0 {
            continue;
        }
        let mean: Vec<f64> = sums[c * d..(c + 1) * d]
            .iter()
            .map(|s| s / counts[c] as f64)
            .collect();
        let wcss: f64 = (0..n)
            .filter(|&i| labels[i] == c)
            .map(|i| dist_sq(h.row(i), &mean))
            .sum();
        total += wcss;
    }
    total
}

/// Lloyd iteration from k-means++ seeds. Returns the fit model and the
/// within-cluster sum of squares after each iteration.
pub fn kmeans_fit(
    h: &Tensor,
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<(PhenotypeModel, Vec<f64>)> {
    let (n, d) = h.dims2()?;
    if n < k {
        return Err(Error::Contract(format!(
            "k-means needs at least k={k} points, got {n}"
        )));
    }
    if k == 0 {
        return Err(Error::Contract("k must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++: first seed uniform, then D²-weighted draws.
    let mut centroid_rows: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroid_rows.push(h.row(rng.gen_range(0..n)).to_vec());
    let mut d2: Vec<f64> = (0..n)
        .map(|i| dist_sq(h.row(i), &centroid_rows[0]))
        .collect();
    while centroid_rows.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            WeightedIndex::new(&d2)
                .expect("weights nonnegative with positive sum")
                .sample(&mut rng)
        } else {
            // All points coincide with a centroid; any pick works.
            rng.gen_range(0..n)
        };
        centroid_rows.push(h.row(next).to_vec());
        for i in 0..n {
            d2[i] = d2[i].min(dist_sq(h.row(i), centroid_rows.last().unwrap()));
        }
    }
    let mut centroids = Tensor::from_rows(&centroid_rows)?;

    let mut labels: Vec<usize> = (0..n).map(|i| nearest(&centroids, h.row(i))).collect();
    let mut history = Vec::new();
    for _ in 0..max_iter {
        // Mean update; empty clusters keep their previous centroid.
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for j in 0..d {
                sums[labels[i] * d + j] += h.at2(i, j);
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    centroids.data_mut()[c * d + j] = sums[c * d + j] / counts[c] as f64;
                }
            }
        }
        history.push(objective(h, &labels, k));
        let new_labels: Vec<usize> = (0..n).map(|i| nearest(&centroids, h.row(i))).collect();
        if new_labels == labels {
            break;
        }
        labels = new_labels;
    }
    Ok((PhenotypeModel { k, centroids }, history))
}

/// Nearest-centroid labels; ties resolve to the lower centroid index.
pub fn assign(model: &PhenotypeModel, h: &Tensor) -> Vec<usize> {
    let (n, _) = h.dims2().expect("points are 2-D");
    (0..n).map(|i| nearest(&model.centroids, h.row(i))).collect()
}

/// Batch-local consistency loss over predicted cell expression:
/// Σ_k (1/|S_k|) Σ_{i∈S_k} ‖ŷ_i − ȳ_k‖² with batch means; clusters with
/// fewer than 2 members contribute nothing. Gradients flow through the
/// means.
pub fn cluster_loss<'t>(y_cell: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let shape = y_cell.shape();
    let n = shape[0];
    if labels.len() != n {
        return Err(Error::Dimension(format!(
            "{} labels for {n} predicted cells",
            labels.len()
        )));
    }
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut total: Option<Var<'t>> = None;
    for c in 0..k {
        let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        let m = members.len();
        if m < 2 {
            continue;
        }
        let rows = y_cell.gather_rows(&members)?;
        let averager = y_cell.tape_constant(Tensor::full(&[1, m], 1.0 / m as f64));
        let mean = averager.matmul(rows)?;
        let spread = y_cell
            .tape_constant(Tensor::full(&[m, 1], 1.0))
            .matmul(mean)?;
        let centered = rows.sub(spread)?;
        let term = centered.mul(centered)?.sum_all().scale(1.0 / m as f64);
        total = Some(match total {
            None => term,
            Some(acc) => acc.add(term)?,
        });
    }
    Ok(total.unwrap_or_else(|| y_cell.tape_constant(Tensor::scalar(0.0))))
}
