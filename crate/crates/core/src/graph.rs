//! Spatial kNN graphs and the multi-head graph-attention encoder.
//!
//! Graphs are exact k-nearest-neighbor by Euclidean distance with ties
//! broken toward the lower index. Attention runs over ragged
//! neighborhoods as flat edge lists (source, destination) with a
//! self-loop per node, so no dense N×N mask is ever materialized.

use crate::error::{Error, Result};
use crate::tape::Var;

/// Node count above which construction switches to grid buckets.
const BRUTE_FORCE_LIMIT: usize = 20_000;

/// Per-row layer-norm epsilon used across the model.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct SpatialGraph {
    pub n: usize,
    /// Exactly min(k, n-1) neighbor indices per node, nearest first.
    pub neighbors: Vec<Vec<usize>>,
    /// Flat edges including one self-loop per node; `dst` is nondecreasing.
    pub edge_src: Vec<usize>,
    pub edge_dst: Vec<usize>,
}

impl SpatialGraph {
    fn from_neighbors(neighbors: Vec<Vec<usize>>) -> Self {
        let n = neighbors.len();
        let mut edge_src = Vec::with_capacity(n + neighbors.iter().map(Vec::len).sum::<usize>());
        let mut edge_dst = Vec::with_capacity(edge_src.capacity());
        for (i, nbrs) in neighbors.iter().enumerate() {
            edge_src.push(i);
            edge_dst.push(i);
            for &j in nbrs {
                edge_src.push(j);
                edge_dst.push(i);
            }
        }
        SpatialGraph {
            n,
            neighbors,
            edge_src,
            edge_dst,
        }
    }

    pub fn n_edges(&self) -> usize {
        self.edge_src.len()
    }
}

fn d2(a: (f64, f64), b: (f64, f64)) -> f64 {
    let dx = a.0 - b.0;
    let dy = a.1 - b.1;
    dx * dx + dy * dy
}

/// Keep the k nearest of `cands` to `coords[i]`, ties to lower index.
fn k_nearest(coords: &[(f64, f64)], i: usize, cands: &mut Vec<usize>, k: usize) -> Vec<usize> {
    cands.sort_unstable_by(|&a, &b| {
        d2(coords[i], coords[a])
            .partial_cmp(&d2(coords[i], coords[b]))
            .expect("finite coordinates")
            .then(a.cmp(&b))
    });
    cands.truncate(k);
    cands.clone()
}

fn knn_brute(coords: &[(f64, f64)], k: usize) -> Vec<Vec<usize>> {
    let n = coords.len();
    (0..n)
        .map(|i| {
            let mut cands: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            k_nearest(coords, i, &mut cands, k)
        })
        .collect()
}

fn knn_grid(coords: &[(f64, f64)], k: usize) -> Vec<Vec<usize>> {
    let n = coords.len();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in coords {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    // Aim for ~2 points per bucket so rings stay short.
    let cells = ((n as f64 / 2.0).sqrt().ceil() as usize).max(1);
    let w = ((x1 - x0) / cells as f64).max(1e-12);
    let h = ((y1 - y0) / cells as f64).max(1e-12);
    let bucket_of = |p: (f64, f64)| -> (usize, usize) {
        let bx = (((p.0 - x0) / w) as usize).min(cells - 1);
        let by = (((p.1 - y0) / h) as usize).min(cells - 1);
        (bx, by)
    };
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); cells * cells];
    for (i, &p) in coords.iter().enumerate() {
        let (bx, by) = bucket_of(p);
        buckets[by * cells + bx].push(i);
    }
    (0..n)
        .map(|i| {
            let (bx, by) = bucket_of(coords[i]);
            let mut cands: Vec<usize> = Vec::new();
            let mut ring = 0usize;
            loop {
                // Ring r adds every bucket at Chebyshev distance exactly r.
                for dy in -(ring as i64)..=(ring as i64) {
                    for dx in -(ring as i64)..=(ring as i64) {
                        if dx.unsigned_abs() as usize != ring && dy.unsigned_abs() as usize != ring {
                            continue;
                        }
                        let (gx, gy) = (bx as i64 + dx, by as i64 + dy);
                        if gx < 0 || gy < 0 || gx >= cells as i64 || gy >= cells as i64 {
                            continue;
                        }
                        for &j in &buckets[gy as usize * cells + gx as usize] {
                            if j != i {
                                cands.push(j);
                            }
                        }
                    }
                }
                // Safe to stop once the kth candidate is closer than any
                // point the next ring could hold.
                if cands.len() >= k {
                    let mut snapshot = cands.clone();
                    let kth = *k_nearest(coords, i, &mut snapshot, k).last().unwrap();
                    let kth_d = d2(coords[i], coords[kth]).sqrt();
                    // Unexplored buckets sit at Chebyshev distance > ring, so
                    // their points are at least ring·min(w,h) away. Strict
                    // comparison keeps boundary ties exact.
                    let ring_clearance = ring as f64 * w.min(h);
                    if kth_d < ring_clearance || ring >= cells {
                        break;
                    }
                } else if ring >= cells {
                    break;
                }
                ring += 1;
            }
            k_nearest(coords, i, &mut cands, k)
        })
        .collect()
}

/// Exact kNN graph over 2-D points. Brute force for small inputs,
/// grid buckets beyond 20k nodes; both produce identical neighbor sets.
pub fn build_knn_graph(coords: &[(f64, f64)], k: usize) -> Result<SpatialGraph> {
    if coords.len() < 2 {
        return Err(Error::Graph(format!(
            "need at least 2 nodes, got {}",
            coords.len()
        )));
    }
    if k == 0 {
        return Err(Error::Graph("k must be at least 1".into()));
    }
    if coords.iter().any(|&(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::Graph("non-finite coordinate".into()));
    }
    let neighbors = if coords.len() <= BRUTE_FORCE_LIMIT {
        knn_brute(coords, k)
    } else {
        knn_grid(coords, k)
    };
    Ok(SpatialGraph::from_neighbors(neighbors))
}

/// kNN graph per patch group; edges never cross patch boundaries.
/// Singleton patches keep only their self-loop. With `patch_of` = None
/// the whole bag is one patch.
pub fn build_bag_graph(
    coords: &[(f64, f64)],
    patch_of: Option<&[usize]>,
    k: usize,
) -> Result<SpatialGraph> {
    let n = coords.len();
    if n == 0 {
        return Err(Error::Graph("empty bag".into()));
    }
    let Some(patches) = patch_of else {
        if n == 1 {
            return Ok(SpatialGraph::from_neighbors(vec![Vec::new()]));
        }
        return build_knn_graph(coords, k);
    };
    if patches.len() != n {
        return Err(Error::Graph(format!(
            "{} patch ids for {n} cells",
            patches.len()
        )));
    }
    let n_patches = patches.iter().copied().max().map_or(0, |m| m + 1);
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n_patches];
    for (i, &p) in patches.iter().enumerate() {
        groups[p].push(i);
    }
    let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n];
    for group in &groups {
        if group.len() < 2 {
            continue;
        }
        let local: Vec<(f64, f64)> = group.iter().map(|&i| coords[i]).collect();
        let g = build_knn_graph(&local, k)?;
        for (li, nbrs) in g.neighbors.iter().enumerate() {
            neighbors[group[li]] = nbrs.iter().map(|&lj| group[lj]).collect();
        }
    }
    Ok(SpatialGraph::from_neighbors(neighbors))
}

/// One GAT layer's parameters as tape variables.
pub struct GatLayerVars<'t> {
    /// Per head: projection (D_in × d_head) and attention vector (2·d_head × 1).
    pub heads: Vec<(Var<'t>, Var<'t>)>,
    pub out_proj: Var<'t>,
}

/// Single attention layer: per-head neighborhood attention over the
/// self-loop-augmented edge set, heads concatenated, projected, then
/// layer-normalized and rectified.
pub fn gat_layer<'t>(
    h: Var<'t>,
    g: &SpatialGraph,
    layer: &GatLayerVars<'t>,
    slope: f64,
) -> Result<Var<'t>> {
    if layer.heads.is_empty() {
        return Err(Error::Dimension("GAT layer with zero heads".into()));
    }
    let mut head_outs: Vec<Var<'t>> = Vec::with_capacity(layer.heads.len());
    for (w, a) in &layer.heads {
        let wh = h.matmul(*w)?;
        let wh_dst = wh.gather_rows(&g.edge_dst)?;
        let wh_src = wh.gather_rows(&g.edge_src)?;
        let scores = wh_dst
            .concat(wh_src, 1)?
            .matmul(*a)?
            .leaky_relu(slope);
        let alpha = scores.segment_softmax(&g.edge_dst, g.n)?;
        let pooled = wh_src.scale_rows(alpha)?.segment_sum_rows(&g.edge_dst, g.n)?;
        head_outs.push(pooled);
    }
    let mut cat = head_outs[0];
    for head in &head_outs[1..] {
        cat = cat.concat(*head, 1)?;
    }
    Ok(cat.matmul(layer.out_proj)?.layer_norm(LN_EPS)?.relu())
}

/// Stack of GAT layers; an empty stack is the identity.
pub fn gat_encode<'t>(
    h: Var<'t>,
    g: &SpatialGraph,
    layers: &[GatLayerVars<'t>],
    slope: f64,
) -> Result<Var<'t>> {
    let mut x = h;
    for layer in layers {
        x = gat_layer(x, g, layer, slope)?;
    }
    Ok(x)
}
