//! Learnable coordinate embeddings and the transformer context encoder.
//!
//! Coordinates quantize into uniform bins over the slide extent; each
//! token's positional vector is the concatenation of an x-table and a
//! y-table row (D/2 each). Tokens are feature + position sums fed
//! through pre-norm self-attention and FFN blocks with residuals and no
//! final norm, so zero output projections make the encoder an identity.
//! Bags larger than the window are chunked; attention never crosses a
//! chunk boundary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::LN_EPS;
use crate::params::Extent;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Tokens per full-attention window when chunking long bags.
pub const ATTN_WINDOW: usize = 4096;

/// Uniform-bin quantization of coordinates over `extent`.
/// Returns x bins, y bins, and how many coordinates fell outside and
/// were clamped.
pub fn quantize(coords: &[(f64, f64)], extent: &Extent, n_pos: usize) -> (Vec<usize>, Vec<usize>, usize) {
    let bin = |v: f64, lo: f64, hi: f64| -> (usize, bool) {
        if hi <= lo {
            return (0, false);
        }
        let t = (v - lo) / (hi - lo);
        let clamped = !(0.0..=1.0).contains(&t);
        let idx = ((t * n_pos as f64) as isize).clamp(0, n_pos as isize - 1) as usize;
        (idx, clamped)
    };
    let mut clamped = 0usize;
    let mut xs = Vec::with_capacity(coords.len());
    let mut ys = Vec::with_capacity(coords.len());
    for &(x, y) in coords {
        let (bx, cx) = bin(x, extent.x_min, extent.x_max);
        let (by, cy) = bin(y, extent.y_min, extent.y_max);
        if cx || cy {
            clamped += 1;
        }
        xs.push(bx);
        ys.push(by);
    }
    (xs, ys, clamped)
}

/// Positional vectors: s_i = emb_x[bin_x(i)] ⊕ emb_y[bin_y(i)].
pub fn positional_embed<'t>(
    emb_x: Var<'t>,
    emb_y: Var<'t>,
    bins_x: &[usize],
    bins_y: &[usize],
) -> Result<Var<'t>> {
    if bins_x.len() != bins_y.len() {
        return Err(Error::Dimension(format!(
            "bin lists differ: {} vs {}",
            bins_x.len(),
            bins_y.len()
        )));
    }
    emb_x.gather_rows(bins_x)?.concat(emb_y.gather_rows(bins_y)?, 1)
}

/// One transformer layer's parameters as tape variables.
pub struct TrfLayerVars<'t> {
    pub q: Var<'t>,
    pub k: Var<'t>,
    pub v: Var<'t>,
    pub o: Var<'t>,
    pub ffn_in: Var<'t>,
    pub ffn_out: Var<'t>,
}

/// Deterministic inverted-dropout mask source for training passes.
pub struct Dropout {
    pub p: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(p: f64, seed: u64) -> Self {
        Dropout {
            p,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn mask(&mut self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let keep = 1.0 - self.p;
        let data: Vec<f64> = (0..n)
            .map(|_| {
                if self.rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        Tensor::new(shape.to_vec(), data).expect("shape product matches")
    }
}

fn multi_head_attention<'t>(
    xn: Var<'t>,
    layer: &TrfLayerVars<'t>,
    heads: usize,
) -> Result<Var<'t>> {
    let d = xn.shape()[1];
    if d % heads != 0 {
        return Err(Error::Dimension(format!(
            "width {d} not divisible by {heads} heads"
        )));
    }
    let d_head = d / heads;
    let q = xn.matmul(layer.q)?;
    let k = xn.matmul(layer.k)?;
    let v = xn.matmul(layer.v)?;
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * d_head, (h + 1) * d_head);
        let qh = q.slice_cols(lo, hi)?;
        let kh = k.slice_cols(lo, hi)?;
        let vh = v.slice_cols(lo, hi)?;
        let attn = qh
            .matmul(kh.transpose()?)?
            .scale(scale)
            .softmax_rows()?;
        head_outs.push(attn.matmul(vh)?);
    }
    let mut cat = head_outs[0];
    for h in &head_outs[1..] {
        cat = cat.concat(*h, 1)?;
    }
    cat.matmul(layer.o)
}

fn encode_window<'t>(
    tokens: Var<'t>,
    layers: &[TrfLayerVars<'t>],
    heads: usize,
    drop: &mut Option<&mut Dropout>,
) -> Result<Var<'t>> {
    let mut x = tokens;
    for layer in layers {
        let mut attn = multi_head_attention(x.layer_norm(LN_EPS)?, layer, heads)?;
        if let Some(d) = drop {
            if d.p > 0.0 {
                let m = d.mask(&attn.shape());
                attn = attn.mul_constant(m)?;
            }
        }
        x = x.add(attn)?;
        let mut ffn = x
            .layer_norm(LN_EPS)?
            .matmul(layer.ffn_in)?
            .relu()
            .matmul(layer.ffn_out)?;
        if let Some(d) = drop {
            if d.p > 0.0 {
                let m = d.mask(&ffn.shape());
                ffn = ffn.mul_constant(m)?;
            }
        }
        x = x.add(ffn)?;
    }
    Ok(x)
}

/// Fused tokens (h + s) through the layer stack. Bags wider than
/// `window` run as independent contiguous chunks.
pub fn transformer_encode<'t>(
    h: Var<'t>,
    s: Var<'t>,
    layers: &[TrfLayerVars<'t>],
    heads: usize,
    window: usize,
    mut drop: Option<&mut Dropout>,
) -> Result<Var<'t>> {
    if h.shape() != s.shape() {
        return Err(Error::Dimension(format!(
            "feature shape {:?} vs positional shape {:?}",
            h.shape(),
            s.shape()
        )));
    }
    let tokens = h.add(s)?;
    let n = tokens.shape()[0];
    if n <= window {
        return encode_window(tokens, layers, heads, &mut drop);
    }
    let mut out: Option<Var<'t>> = None;
    let mut lo = 0;
    while lo < n {
        let hi = (lo + window).min(n);
        let idx: Vec<usize> = (lo..hi).collect();
        let chunk = tokens.gather_rows(&idx)?;
        let enc = encode_window(chunk, layers, heads, &mut drop)?;
        out = Some(match out {
            None => enc,
            Some(acc) => acc.concat(enc, 0)?,
        });
        lo = hi;
    }
    Ok(out.expect("n > 0"))
}
