//! Expression normalization: log1p on raw counts, then per-gene
//! z-scores with statistics fit on the training split only.

use crate::error::{Error, Result};
use crate::params::NormStats;
use crate::tensor::Tensor;

use super::tsv::{ExpressionFrame, Space};

/// Added to sigma in the z-score denominator so constant genes stay
/// finite.
pub const ZSCORE_EPS: f64 = 1e-8;

/// log1p every value of a raw-count frame.
pub fn log1p_frame(expr: &ExpressionFrame) -> Result<ExpressionFrame> {
    match expr.space {
        Space::RawCounts => {}
        other => {
            return Err(Error::Contract(format!(
                "log1p expects raw counts, frame is {}",
                other.tag()
            )))
        }
    }
    let values = expr.values.map(|v| v.ln_1p());
    ExpressionFrame::new(
        expr.unit_ids.clone(),
        expr.unit_coords.clone(),
        values,
        expr.gene_names.clone(),
        Space::Log1p,
    )
}

/// Per-gene mean and population standard deviation of a log1p matrix.
pub fn fit_norm_stats(values: &Tensor) -> Result<NormStats> {
    let (m, g) = values.dims2()?;
    if m == 0 {
        return Err(Error::Dataset("cannot fit stats on zero units".into()));
    }
    let mut mu = vec![0.0; g];
    for i in 0..m {
        for j in 0..g {
            mu[j] += values.data()[i * g + j];
        }
    }
    for v in &mut mu {
        *v /= m as f64;
    }
    let mut sigma = vec![0.0; g];
    for i in 0..m {
        for j in 0..g {
            let d = values.data()[i * g + j] - mu[j];
            sigma[j] += d * d;
        }
    }
    for v in &mut sigma {
        *v = (*v / m as f64).sqrt();
    }
    Ok(NormStats { mu, sigma })
}

/// Bring a frame into z-score space. Raw counts get log1p first. With
/// `stats = None` the statistics are fit on this frame (training
/// split); pass stored stats for validation and test data.
pub fn normalize_expression(
    expr: &ExpressionFrame,
    stats: Option<&NormStats>,
) -> Result<(ExpressionFrame, NormStats)> {
    let logged = match expr.space {
        Space::RawCounts => log1p_frame(expr)?,
        Space::Log1p => expr.clone(),
        Space::Zscore => {
            return Err(Error::Contract(
                "frame is already z-scored; normalizing twice is invalid".into(),
            ))
        }
    };
    let stats = match stats {
        Some(s) => {
            if s.mu.len() != logged.n_genes() {
                return Err(Error::Dimension(format!(
                    "stats cover {} genes, frame has {}",
                    s.mu.len(),
                    logged.n_genes()
                )));
            }
            s.clone()
        }
        None => fit_norm_stats(&logged.values)?,
    };
    let values = normalize_values(&logged.values, &stats)?;
    let frame = ExpressionFrame::new(
        logged.unit_ids,
        logged.unit_coords,
        values,
        logged.gene_names,
        Space::Zscore,
    )?;
    Ok((frame, stats))
}

/// (y - mu) / (sigma + eps), column-wise.
pub fn normalize_values(values: &Tensor, stats: &NormStats) -> Result<Tensor> {
    let (m, g) = values.dims2()?;
    if stats.mu.len() != g || stats.sigma.len() != g {
        return Err(Error::Dimension(format!(
            "stats cover {} genes, matrix has {g}",
            stats.mu.len()
        )));
    }
    let mut out = values.clone();
    for i in 0..m {
        for j in 0..g {
            let v = &mut out.data_mut()[i * g + j];
            *v = (*v - stats.mu[j]) / (stats.sigma[j] + ZSCORE_EPS);
        }
    }
    Ok(out)
}

/// Inverse of `normalize_values`: z * (sigma + eps) + mu.
pub fn denormalize_values(values: &Tensor, stats: &NormStats) -> Result<Tensor> {
    let (m, g) = values.dims2()?;
    if stats.mu.len() != g || stats.sigma.len() != g {
        return Err(Error::Dimension(format!(
            "stats cover {} genes, matrix has {g}",
            stats.mu.len()
        )));
    }
    let mut out = values.clone();
    for i in 0..m {
        for j in 0..g {
            let v = &mut out.data_mut()[i * g + j];
            *v = *v * (stats.sigma[j] + ZSCORE_EPS) + stats.mu[j];
        }
    }
    Ok(out)
}

/// Back from z-score space to log1p space.
pub fn denormalize_expression(
    expr: &ExpressionFrame,
    stats: &NormStats,
) -> Result<ExpressionFrame> {
    if expr.space != Space::Zscore {
        return Err(Error::Contract(format!(
            "denormalize expects z-scores, frame is {}",
            expr.space.tag()
        )));
    }
    ExpressionFrame::new(
        expr.unit_ids.clone(),
        expr.unit_coords.clone(),
        denormalize_values(&expr.values, stats)?,
        expr.gene_names.clone(),
        Space::Log1p,
    )
}
