//! Structure-preserving stain normalization in optical-density space.
//!
//! A tile is factored as V ≈ W·H by sparse non-negative matrix
//! factorization: W holds two stain absorption directions
//! (hematoxylin, eosin), H the per-pixel stain densities. Re-painting
//! the densities with a reference basis normalizes stain appearance
//! while keeping tissue structure, since H is reused rather than
//! re-fit.

use std::path::Path;

use crate::error::{Error, Result};
use crate::ingest::tsv::write_atomic;
use crate::tensor::Tensor;

pub const WHITE_I0: f64 = 255.0;
/// Mean per-channel OD above this marks a tissue pixel.
pub const TISSUE_OD_THRESHOLD: f64 = 0.15;
/// Minimum tissue fraction for a basis fit.
pub const MIN_TISSUE_FRACTION: f64 = 0.01;
pub const DEFAULT_LAMBDA_SPARSE: f64 = 0.1;
pub const DEFAULT_SNMF_ITERS: usize = 200;

// ── optical density ──

#[derive(Debug, Clone)]
pub struct OdImage {
    pub height: usize,
    pub width: usize,
    /// H·W·3 row-major optical densities, all ≥ 0.
    pub od: Vec<f64>,
}

impl OdImage {
    pub fn n_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, i: usize) -> [f64; 3] {
        [self.od[3 * i], self.od[3 * i + 1], self.od[3 * i + 2]]
    }

    /// Tissue mask: mean OD across channels above the threshold.
    pub fn tissue_mask(&self) -> Vec<bool> {
        (0..self.n_pixels())
            .map(|i| {
                let p = self.pixel(i);
                (p[0] + p[1] + p[2]) / 3.0 > TISSUE_OD_THRESHOLD
            })
            .collect()
    }

    pub fn tissue_fraction(&self) -> f64 {
        let mask = self.tissue_mask();
        mask.iter().filter(|&&t| t).count() as f64 / mask.len().max(1) as f64
    }
}

/// Beer-Lambert transform: od = −ln(max(pixel, 1) / I0). White maps
/// to exactly zero.
pub fn rgb_to_od(pixels: &[u8], height: usize, width: usize) -> Result<OdImage> {
    if pixels.len() != height * width * 3 {
        return Err(Error::Dimension(format!(
            "{}x{} RGB image needs {} bytes, got {}",
            height,
            width,
            height * width * 3,
            pixels.len()
        )));
    }
    let od = pixels
        .iter()
        .map(|&p| {
            let v = f64::from(p.max(1));
            if v >= WHITE_I0 {
                0.0
            } else {
                -(v / WHITE_I0).ln()
            }
        })
        .collect();
    Ok(OdImage { height, width, od })
}

/// Inverse transform with rounding; round-trips within 1 intensity
/// step per channel.
pub fn od_to_rgb(od: &OdImage) -> Vec<u8> {
    od.od
        .iter()
        .map(|&d| (WHITE_I0 * (-d).exp()).round().clamp(0.0, 255.0) as u8)
        .collect()
}

// ── stain basis ──

/// Two stain absorption directions as a 3×2 matrix `w[channel][stain]`
/// with unit-norm non-negative columns. Column 0 is hematoxylin,
/// canonically the column with the larger blue-channel OD.
#[derive(Debug, Clone, PartialEq)]
pub struct StainBasis {
    pub w: [[f64; 2]; 3],
}

impl StainBasis {
    pub fn column(&self, k: usize) -> [f64; 3] {
        [self.w[0][k], self.w[1][k], self.w[2][k]]
    }

    pub fn validate(&self) -> Result<()> {
        for k in 0..2 {
            let c = self.column(k);
            if c.iter().any(|&v| !v.is_finite() || v < 0.0) {
                return Err(Error::StainFit(format!("stain column {k} has invalid entries")));
            }
            let norm = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
            if (norm - 1.0).abs() > 1e-3 {
                return Err(Error::StainFit(format!(
                    "stain column {k} has norm {norm}, expected 1"
                )));
            }
        }
        if self.w[2][0] < self.w[2][1] {
            return Err(Error::StainFit(
                "stain columns out of order: hematoxylin must carry the larger blue OD".into(),
            ));
        }
        Ok(())
    }
}

/// A fitted tile factorization: canonical basis, per-pixel densities
/// for the whole image (2×N), and the penalized SNMF objective per
/// iteration (index 0 is the initial value).
#[derive(Debug, Clone)]
pub struct StainFit {
    pub basis: StainBasis,
    pub density: Tensor,
    pub objective: Vec<f64>,
}

/// Reference appearance: basis plus the 99th-percentile density of
/// each stain, as stored in `basis.tsv`.
#[derive(Debug, Clone)]
pub struct StainReference {
    pub basis: StainBasis,
    pub max_density: [f64; 2],
}

/// Initial basis from the data: the two extreme-angle directions of
/// the tissue OD cloud inside its top-2 eigenplane. Entries are kept
/// strictly positive so multiplicative updates cannot lock at zero.
fn init_basis(v: &[[f64; 3]]) -> [[f64; 2]; 3] {
    let dot = |a: &[f64; 3], b: &[f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let mut s = nalgebra::Matrix3::<f64>::zeros();
    for p in v {
        for a in 0..3 {
            for b in 0..3 {
                s[(a, b)] += p[a] * p[b];
            }
        }
    }
    let eig = nalgebra::SymmetricEigen::new(s);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let axis = |k: usize| -> [f64; 3] {
        let c = eig.eigenvectors.column(idx[k]);
        [c[0], c[1], c[2]]
    };
    let mut e1 = axis(0);
    let e2 = axis(1);
    // Point the principal axis into the data so angles cluster at 0.
    let mean_proj: f64 = v.iter().map(|p| dot(p, &e1)).sum();
    if mean_proj < 0.0 {
        for c in &mut e1 {
            *c = -*c;
        }
    }
    let mut phis: Vec<f64> = v.iter().map(|p| dot(p, &e2).atan2(dot(p, &e1))).collect();
    phis.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = |q: f64| -> f64 {
        let i = ((q * phis.len() as f64).ceil() as usize).clamp(1, phis.len());
        phis[i - 1]
    };
    let dir = |phi: f64| -> [f64; 3] {
        let mut d = [0.0; 3];
        let mut norm = 0.0;
        for c in 0..3 {
            d[c] = (phi.cos() * e1[c] + phi.sin() * e2[c]).max(1e-3);
            norm += d[c] * d[c];
        }
        let norm = norm.sqrt();
        for c in &mut d {
            *c /= norm;
        }
        d
    };
    let lo = dir(rank(0.01));
    let hi = dir(rank(0.99));
    [[lo[0], hi[0]], [lo[1], hi[1]], [lo[2], hi[2]]]
}

/// Exact non-negative least squares in two variables:
/// argmin_{h≥0} ½‖v − W h‖² + λ(h₀+h₁), by KKT case enumeration.
fn nnls2(w: &[[f64; 2]; 3], v: [f64; 3], lambda: f64) -> [f64; 2] {
    let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let w0 = [w[0][0], w[1][0], w[2][0]];
    let w1 = [w[0][1], w[1][1], w[2][1]];
    let g00 = dot(w0, w0);
    let g01 = dot(w0, w1);
    let g11 = dot(w1, w1);
    let b0 = dot(w0, v) - lambda;
    let b1 = dot(w1, v) - lambda;
    let objective = |h: [f64; 2]| {
        let mut r = 0.0;
        for c in 0..3 {
            let e = v[c] - w[c][0] * h[0] - w[c][1] * h[1];
            r += e * e;
        }
        0.5 * r + lambda * (h[0] + h[1])
    };
    let mut candidates: Vec<[f64; 2]> = vec![[0.0, 0.0]];
    if g00 > 0.0 {
        candidates.push([(b0 / g00).max(0.0), 0.0]);
    }
    if g11 > 0.0 {
        candidates.push([0.0, (b1 / g11).max(0.0)]);
    }
    let det = g00 * g11 - g01 * g01;
    if det > 1e-12 * g00.max(g11).max(1e-300) {
        let h0 = (b0 * g11 - b1 * g01) / det;
        let h1 = (b1 * g00 - b0 * g01) / det;
        if h0 >= 0.0 && h1 >= 0.0 {
            candidates.push([h0, h1]);
        }
    }
    let mut best = candidates[0];
    let mut best_obj = objective(best);
    for &h in &candidates[1..] {
        let o = objective(h);
        if o < best_obj - 1e-15 {
            best = h;
            best_obj = o;
        }
    }
    best
}

/// Fit the stain basis by multiplicative-update SNMF on tissue pixels
/// (L1 penalty λ on the densities), then extract densities for every
/// pixel against the canonical basis by exact unpenalized NNLS.
pub fn fit_stain_basis(od: &OdImage, lambda: f64, iters: usize) -> Result<StainFit> {
    if lambda < 0.0 {
        return Err(Error::Contract(format!("lambda {lambda} must be non-negative")));
    }
    if iters == 0 {
        return Err(Error::Contract("at least one update iteration required".into()));
    }
    let mask = od.tissue_mask();
    let tissue: Vec<usize> = (0..od.n_pixels()).filter(|&i| mask[i]).collect();
    let frac = tissue.len() as f64 / od.n_pixels().max(1) as f64;
    if frac < MIN_TISSUE_FRACTION {
        return Err(Error::StainFit(format!(
            "tissue covers {:.2}% of the tile, below the 1% minimum",
            100.0 * frac
        )));
    }

    // V is 3×N over tissue pixels, column-major per pixel.
    let n = tissue.len();
    let v: Vec<[f64; 3]> = tissue.iter().map(|&i| od.pixel(i)).collect();
    let mut w = init_basis(&v);
    // Initial densities from the clamped normal equations.
    let mut h: Vec<[f64; 2]> = v.iter().map(|&p| {
        let sol = nnls2(&w, p, 0.0);
        [sol[0].max(1e-3), sol[1].max(1e-3)]
    })
    .collect();

    let eps = 1e-12;
    let penalized = |w: &[[f64; 2]; 3], h: &[[f64; 2]]| -> f64 {
        let mut obj = 0.0;
        for (p, d) in v.iter().zip(h) {
            for c in 0..3 {
                let e = p[c] - w[c][0] * d[0] - w[c][1] * d[1];
                obj += 0.5 * e * e;
            }
            obj += lambda * (d[0] + d[1]);
        }
        obj
    };
    let mut objective = Vec::with_capacity(iters + 1);
    objective.push(penalized(&w, &h));

    for _ in 0..iters {
        // H ← H ∘ WᵀV / (WᵀW H + λ)
        let mut gram = [[0.0; 2]; 2];
        for a in 0..2 {
            for b in 0..2 {
                gram[a][b] = (0..3).map(|c| w[c][a] * w[c][b]).sum();
            }
        }
        for (p, d) in v.iter().zip(h.iter_mut()) {
            for k in 0..2 {
                let num: f64 = (0..3).map(|c| w[c][k] * p[c]).sum();
                let den = gram[k][0] * d[0] + gram[k][1] * d[1] + lambda + eps;
                d[k] *= num / den;
            }
        }
        // W ← W ∘ VHᵀ / (W HHᵀ)
        let mut vht = [[0.0; 2]; 3];
        let mut hht = [[0.0; 2]; 2];
        for (p, d) in v.iter().zip(&h) {
            for c in 0..3 {
                vht[c][0] += p[c] * d[0];
                vht[c][1] += p[c] * d[1];
            }
            hht[0][0] += d[0] * d[0];
            hht[0][1] += d[0] * d[1];
            hht[1][1] += d[1] * d[1];
        }
        hht[1][0] = hht[0][1];
        for c in 0..3 {
            for k in 0..2 {
                let den = w[c][0] * hht[0][k] + w[c][1] * hht[1][k] + eps;
                w[c][k] *= vht[c][k] / den;
            }
        }
        objective.push(penalized(&w, &h));
    }
    let _ = n;

    // Canonical form: unit columns, hematoxylin first by blue OD.
    let mut norms = [0.0; 2];
    for k in 0..2 {
        norms[k] = (0..3).map(|c| w[c][k] * w[c][k]).sum::<f64>().sqrt();
        if norms[k] <= 0.0 || !norms[k].is_finite() {
            return Err(Error::StainFit(format!("stain column {k} collapsed to zero")));
        }
        for c in 0..3 {
            w[c][k] /= norms[k];
        }
    }
    if w[2][0] < w[2][1] {
        for c in 0..3 {
            w[c].swap(0, 1);
        }
    }
    let basis = StainBasis { w };
    basis.validate()?;

    // Densities for the full image against the final basis.
    let np = od.n_pixels();
    let mut density = vec![0.0; 2 * np];
    for i in 0..np {
        let d = nnls2(&basis.w, od.pixel(i), 0.0);
        density[i] = d[0];
        density[np + i] = d[1];
    }
    Ok(StainFit {
        basis,
        density: Tensor::new(vec![2, np], density)?,
        objective,
    })
}

/// 99th-percentile density of each stain over tissue pixels
/// (nearest-rank).
pub fn tissue_max_density(fit: &StainFit, od: &OdImage) -> [f64; 2] {
    let mask = od.tissue_mask();
    let np = od.n_pixels();
    let mut out = [0.0; 2];
    for k in 0..2 {
        let mut vals: Vec<f64> = (0..np)
            .filter(|&i| mask[i])
            .map(|i| fit.density.data()[k * np + i])
            .collect();
        if vals.is_empty() {
            continue;
        }
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let rank = ((0.99 * vals.len() as f64).ceil() as usize).clamp(1, vals.len());
        out[k] = vals[rank - 1];
    }
    out
}

/// Fit a reference appearance from a tile: its basis plus max
/// densities.
pub fn fit_reference(pixels: &[u8], height: usize, width: usize, lambda: f64, iters: usize) -> Result<StainReference> {
    let od = rgb_to_od(pixels, height, width)?;
    let fit = fit_stain_basis(&od, lambda, iters)?;
    let max_density = tissue_max_density(&fit, &od);
    Ok(StainReference {
        basis: fit.basis,
        max_density,
    })
}

/// Re-paint a tile with the reference appearance: estimate the tile's
/// own basis and densities, rescale each density row so its p99
/// matches the reference, then render reference_basis · density.
/// Near-white tiles (under 1% tissue) pass through unchanged.
pub fn normalize_to_reference(
    pixels: &[u8],
    height: usize,
    width: usize,
    reference: &StainReference,
    lambda: f64,
    iters: usize,
) -> Result<Vec<u8>> {
    reference.basis.validate()?;
    let od = rgb_to_od(pixels, height, width)?;
    if od.tissue_fraction() < MIN_TISSUE_FRACTION {
        return Ok(pixels.to_vec());
    }
    let fit = fit_stain_basis(&od, lambda, iters)?;
    let src_max = tissue_max_density(&fit, &od);
    let scale = [
        if src_max[0] > 1e-8 { reference.max_density[0] / src_max[0] } else { 1.0 },
        if src_max[1] > 1e-8 { reference.max_density[1] / src_max[1] } else { 1.0 },
    ];
    let np = od.n_pixels();
    let mut out = vec![0.0; 3 * np];
    let wr = &reference.basis.w;
    for i in 0..np {
        let d0 = fit.density.data()[i] * scale[0];
        let d1 = fit.density.data()[np + i] * scale[1];
        for c in 0..3 {
            out[3 * i + c] = wr[c][0] * d0 + wr[c][1] * d1;
        }
    }
    Ok(od_to_rgb(&OdImage {
        height,
        width,
        od: out,
    }))
}

// ── basis file ──

/// `basis.tsv`: three rows of the 3×2 OD matrix, then one row with
/// the two max densities.
pub fn write_basis(path: &Path, reference: &StainReference) -> Result<()> {
    reference.basis.validate()?;
    let mut out = String::new();
    for c in 0..3 {
        out.push_str(&format!("{}\t{}\n", reference.basis.w[c][0], reference.basis.w[c][1]));
    }
    out.push_str(&format!(
        "{}\t{}\n",
        reference.max_density[0], reference.max_density[1]
    ));
    write_atomic(path, out.as_bytes())
}

pub fn read_basis(path: &Path) -> Result<StainReference> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows: Vec<Vec<f64>> = text
        .lines()
        .enumerate()
        .map(|(ln, line)| {
            line.split('\t')
                .map(|s| {
                    s.trim().parse::<f64>().map_err(|_| {
                        Error::Parse(format!("{}:{}: bad number {s:?}", path.display(), ln + 1))
                    })
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    if rows.len() != 4 || rows.iter().any(|r| r.len() != 2) {
        return Err(Error::Parse(format!(
            "{}: expected 4 rows of 2 values",
            path.display()
        )));
    }
    let reference = StainReference {
        basis: StainBasis {
            w: [
                [rows[0][0], rows[0][1]],
                [rows[1][0], rows[1][1]],
                [rows[2][0], rows[2][1]],
            ],
        },
        max_density: [rows[3][0], rows[3][1]],
    };
    reference.basis.validate()?;
    if reference.max_density.iter().any(|&d| !d.is_finite() || d < 0.0) {
        return Err(Error::Parse(format!(
            "{}: max densities must be non-negative",
            path.display()
        )));
    }
    Ok(reference)
}

// ── PNG glue ──

pub fn load_png(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let img = image::open(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok((img.into_raw(), h as usize, w as usize))
}

pub fn save_png(path: &Path, pixels: &[u8], height: usize, width: usize) -> Result<()> {
    let img = image::RgbImage::from_raw(width as u32, height as u32, pixels.to_vec())
        .ok_or_else(|| {
            Error::Dimension(format!(
                "{}x{width} image needs {} bytes, got {}",
                height,
                height * width * 3,
                pixels.len()
            ))
        })?;
    img.save(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}
