//! PCA compression of cell features: mean-center, eigendecompose the
//! covariance, keep the top-d axes.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::params::ParamTree;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// d x F, rows orthonormal, sorted by decreasing eigenvalue.
    pub components: Tensor,
    pub explained_variance: Vec<f64>,
}

/// Fit on N x F features. Covariance uses 1/N, so the mean squared
/// reconstruction error at d equals the sum of the discarded
/// eigenvalues.
pub fn fit_pca(features: &Tensor, d: usize) -> Result<PcaModel> {
    let (n, f) = features.dims2()?;
    if d == 0 {
        return Err(Error::Contract("PCA dimension must be positive".into()));
    }
    if d >= f {
        return Err(Error::Contract(format!(
            "PCA dimension {d} must be below feature width {f}"
        )));
    }
    if n <= d {
        return Err(Error::Contract(format!(
            "PCA needs more rows than dimensions: {n} rows for d={d}"
        )));
    }
    let mut mean = vec![0.0; f];
    for i in 0..n {
        for j in 0..f {
            mean[j] += features.data()[i * f + j];
        }
    }
    for v in &mut mean {
        *v /= n as f64;
    }
    let mut cov = DMatrix::<f64>::zeros(f, f);
    for i in 0..n {
        let row = &features.data()[i * f..(i + 1) * f];
        for a in 0..f {
            let da = row[a] - mean[a];
            if da == 0.0 {
                continue;
            }
            for b in a..f {
                cov[(a, b)] += da * (row[b] - mean[b]);
            }
        }
    }
    for a in 0..f {
        for b in a..f {
            let v = cov[(a, b)] / n as f64;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..f).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut comps = Vec::with_capacity(d * f);
    let mut explained = Vec::with_capacity(d);
    for &idx in order.iter().take(d) {
        let col = eig.eigenvectors.column(idx);
        // Sign convention: the largest-magnitude entry is positive.
        let lead = (0..f)
            .max_by(|&a, &b| {
                col[a]
                    .abs()
                    .partial_cmp(&col[b].abs())
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(b.cmp(&a))
            })
            .unwrap_or(0);
        let flip = if col[lead] < 0.0 { -1.0 } else { 1.0 };
        for a in 0..f {
            comps.push(col[a] * flip);
        }
        explained.push(eig.eigenvalues[idx].max(0.0));
    }
    Ok(PcaModel {
        mean,
        components: Tensor::new(vec![d, f], comps)?,
        explained_variance: explained,
    })
}

/// Project N x F features to N x d scores: (X - mean) C^T.
pub fn apply_pca(model: &PcaModel, features: &Tensor) -> Result<Tensor> {
    let (n, f) = features.dims2()?;
    if f != model.mean.len() {
        return Err(Error::Dimension(format!(
            "features have width {f}, PCA was fit on {}",
            model.mean.len()
        )));
    }
    let mut centered = features.clone();
    for i in 0..n {
        for j in 0..f {
            centered.data_mut()[i * f + j] -= model.mean[j];
        }
    }
    centered.matmul(&model.components.transpose()?)
}

/// Store the fitted basis in the tree's reserved PCA tensors.
pub fn install_pca(tree: &mut ParamTree, model: &PcaModel) -> Result<()> {
    let f = tree.arch.feature_dim;
    let d = tree.arch.pca_dim;
    let (md, mf) = model.components.dims2()?;
    if mf != f || md != d {
        return Err(Error::Dimension(format!(
            "PCA basis {md}x{mf} does not match architecture {d}x{f}"
        )));
    }
    tree.set_tensor("pca.mean", Tensor::new(vec![1, f], model.mean.clone())?)?;
    tree.set_tensor("pca.components", model.components.transpose()?)?;
    Ok(())
}

/// Mean squared reconstruction error of the fitted basis on data.
pub fn reconstruction_error(model: &PcaModel, features: &Tensor) -> Result<f64> {
    let (n, f) = features.dims2()?;
    let scores = apply_pca(model, features)?;
    let approx = scores.matmul(&model.components)?;
    let mut err = 0.0;
    for i in 0..n {
        for j in 0..f {
            let d = features.data()[i * f + j] - model.mean[j] - approx.data()[i * f + j];
            err += d * d;
        }
    }
    Ok(err / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::randn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn line_in_3d_explains_everything() {
        let mut data = Vec::new();
        for i in 0..10 {
            let t = i as f64;
            data.extend_from_slice(&[2.0 * t, -t, 0.5 * t]);
        }
        let x = Tensor::new(vec![10, 3], data).unwrap();
        let model = fit_pca(&x, 1).unwrap();
        let total: f64 = model.explained_variance.iter().sum();
        assert!(total > 0.0);
        assert!(reconstruction_error(&model, &x).unwrap() < 1e-18);
    }

    #[test]
    fn isotropic_gaussian_splits_variance_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&[4000, 4], 1.0, &mut rng);
        let model = fit_pca(&x, 2).unwrap();
        let full = fit_pca(&x, 3).unwrap();
        let kept: f64 = model.explained_variance.iter().sum();
        // Total variance is the trace; estimate it from data directly.
        let mut mean = vec![0.0; 4];
        for i in 0..4000 {
            for j in 0..4 {
                mean[j] += x.data()[i * 4 + j];
            }
        }
        for v in &mut mean {
            *v /= 4000.0;
        }
        let mut trace = 0.0;
        for i in 0..4000 {
            for j in 0..4 {
                let d = x.data()[i * 4 + j] - mean[j];
                trace += d * d;
            }
        }
        trace /= 4000.0;
        let ratio = kept / trace;
        assert!((ratio - 0.5).abs() < 0.05, "ratio {ratio}");
        assert!(full.explained_variance.len() == 3);
    }

    #[test]
    fn reconstruction_error_matches_discarded_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..5 {
            let n = 40 + trial;
            let f = 6;
            // Correlated data: random mix of a few latent factors.
            let latent = randn(&[n, 3], 1.0, &mut rng);
            let mix = randn(&[3, f], 1.0, &mut rng);
            let noise = randn(&[n, f], 0.1, &mut rng);
            let x = latent.matmul(&mix).unwrap().add(&noise).unwrap();
            let d = 2;
            let model = fit_pca(&x, d).unwrap();
            // Discarded spectrum = full trace minus kept eigenvalues.
            let mut mean = vec![0.0; f];
            for i in 0..n {
                for j in 0..f {
                    mean[j] += x.data()[i * f + j];
                }
            }
            for v in &mut mean {
                *v /= n as f64;
            }
            let mut trace = 0.0;
            for i in 0..n {
                for j in 0..f {
                    let dd = x.data()[i * f + j] - mean[j];
                    trace += dd * dd;
                }
            }
            trace /= n as f64;
            let kept: f64 = model.explained_variance.iter().sum();
            let discarded = trace - kept;
            let err = reconstruction_error(&model, &x).unwrap();
            assert!(
                (err - discarded).abs() < 1e-6,
                "err {err} vs discarded {discarded}"
            );
        }
    }

    #[test]
    fn component_rows_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&[30, 5], 1.0, &mut rng);
        let model = fit_pca(&x, 3).unwrap();
        let gram = model
            .components
            .matmul(&model.components.transpose().unwrap())
            .unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram.at2(i, j) - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn contract_violations_rejected() {
        let x = Tensor::zeros(&[3, 4]);
        assert!(fit_pca(&x, 4).is_err());
        assert!(fit_pca(&x, 3).is_err());
        assert!(fit_pca(&x, 0).is_err());
    }

    #[test]
    fn deterministic_across_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn(&[25, 6], 1.0, &mut rng);
        let a = fit_pca(&x, 3).unwrap();
        let b = fit_pca(&x, 3).unwrap();
        assert_eq!(a.components.data(), b.components.data());
        assert_eq!(a.mean, b.mean);
    }
}
