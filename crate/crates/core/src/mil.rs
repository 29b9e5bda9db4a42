//! Gene-query attention pooling, the shared readout head, and
//! attention-weighted deconvolution back to cells.
//!
//! Pooling is row-stochastic over cells, so predictions are invariant to
//! duplicating every instance, and deconvolved per-cell expressions sum
//! back to the bag prediction exactly.

use crate::error::{Error, Result};
use crate::graph::LN_EPS;
use crate::tape::Var;
use crate::tensor::Tensor;

/// A = softmax_rows(Q·Hᵀ/√D), Z = A·H.
/// Returns the G×N attention map and G×D gene latents.
pub fn pool<'t>(h_cell: Var<'t>, q_gene: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let h_shape = h_cell.shape();
    if h_shape[0] == 0 {
        return Err(Error::Dataset("empty bag: no cells to pool".into()));
    }
    let d = h_shape[1];
    let scores = q_gene
        .matmul(h_cell.transpose()?)?
        .scale(1.0 / (d as f64).sqrt());
    let a = scores.softmax_rows()?;
    let z = a.matmul(h_cell)?;
    Ok((a, z))
}

/// Per-gene scalar: softplus(w2ᵀ relu(w1ᵀ LN(z_g))), softplus optional.
/// Output shape G×1.
pub fn readout<'t>(
    z_gene: Var<'t>,
    w1: Var<'t>,
    w2: Var<'t>,
    use_softplus: bool,
) -> Result<Var<'t>> {
    let pre = z_gene.layer_norm(LN_EPS)?.matmul(w1)?.relu().matmul(w2)?;
    Ok(if use_softplus { pre.softplus() } else { pre })
}

/// y_cell[i, g] = A[g, i] · y_spot[g]; columns sum back to y_spot.
pub fn deconvolve<'t>(a: Var<'t>, y_spot: Var<'t>) -> Result<Var<'t>> {
    let a_shape = a.shape();
    let y_shape = y_spot.shape();
    if y_shape.len() != 2 || y_shape[1] != 1 || y_shape[0] != a_shape[0] {
        return Err(Error::Dimension(format!(
            "deconvolve wants y as ({}, 1), got {:?}",
            a_shape[0], y_shape
        )));
    }
    let n = a_shape[1];
    let at = a.transpose()?;
    // Broadcast y across cells as an outer product with a ones column.
    let ones = at.tape_constant(Tensor::full(&[n, 1], 1.0));
    let spread = ones.matmul(y_spot.transpose()?)?;
    at.mul(spread)
}

/// Plain-tensor deconvolution for inference paths.
pub fn deconvolve_values(a: &Tensor, y_spot: &[f64]) -> Result<Tensor> {
    let (g, n) = a.dims2()?;
    if y_spot.len() != g {
        return Err(Error::Dimension(format!(
            "attention has {g} genes, y has {}",
            y_spot.len()
        )));
    }
    let mut out = Tensor::zeros(&[n, g]);
    for gi in 0..g {
        for i in 0..n {
            out.data_mut()[i * g + gi] = a.at2(gi, i) * y_spot[gi];
        }
    }
    Ok(out)
}
