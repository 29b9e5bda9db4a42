//! Highly-variable gene selection: dispersion z-scores within
//! equal-occupancy mean-expression bins, pooled across samples, then
//! intersected with the highest-expressed genes.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

use super::tsv::{ExpressionFrame, Space};

pub const EXCLUDED_PREFIXES: &[&str] = &["MT-", "RPS", "RPL"];

#[derive(Debug, Clone)]
pub struct HvgConfig {
    /// Equal-occupancy mean-expression bins.
    pub n_bins: usize,
    /// Genes kept per sample before pooling.
    pub per_sample_top: usize,
    pub excluded_prefixes: Vec<String>,
}

impl Default for HvgConfig {
    fn default() -> Self {
        HvgConfig {
            n_bins: 20,
            per_sample_top: 2000,
            excluded_prefixes: EXCLUDED_PREFIXES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Per-gene mean and variance-to-mean dispersion of a log1p frame.
fn gene_stats(expr: &ExpressionFrame) -> Result<(Vec<f64>, Vec<f64>)> {
    if expr.space != Space::Log1p {
        return Err(Error::Contract(format!(
            "gene selection expects log1p values, frame is {}",
            expr.space.tag()
        )));
    }
    let (m, g) = expr.values.dims2()?;
    let mut mean = vec![0.0; g];
    for i in 0..m {
        for j in 0..g {
            mean[j] += expr.values.data()[i * g + j];
        }
    }
    for v in &mut mean {
        *v /= m as f64;
    }
    let mut disp = vec![0.0; g];
    for i in 0..m {
        for j in 0..g {
            let d = expr.values.data()[i * g + j] - mean[j];
            disp[j] += d * d;
        }
    }
    for j in 0..g {
        let var = disp[j] / m as f64;
        disp[j] = if mean[j] > 0.0 { var / mean[j] } else { 0.0 };
    }
    Ok((mean, disp))
}

/// Dispersion z-scores within equal-occupancy mean bins. Returns one z
/// per gene plus the number of bins whose dispersion spread was zero
/// (their members all get z = 0).
pub fn dispersion_z(expr: &ExpressionFrame, n_bins: usize) -> Result<(Vec<f64>, usize)> {
    if n_bins == 0 {
        return Err(Error::Contract("n_bins must be at least 1".into()));
    }
    let (mean, disp) = gene_stats(expr)?;
    let g = mean.len();
    let mut order: Vec<usize> = (0..g).collect();
    order.sort_by(|&a, &b| {
        mean[a]
            .partial_cmp(&mean[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(expr.gene_names[a].cmp(&expr.gene_names[b]))
    });
    let bins = n_bins.min(g);
    let mut z = vec![0.0; g];
    let mut flat_bins = 0usize;
    // Bin b covers order[b*g/bins .. (b+1)*g/bins): occupancy differs
    // by at most one gene.
    for b in 0..bins {
        let lo = b * g / bins;
        let hi = (b + 1) * g / bins;
        if lo == hi {
            continue;
        }
        let members = &order[lo..hi];
        let m = members.len() as f64;
        let mu: f64 = members.iter().map(|&j| disp[j]).sum::<f64>() / m;
        let var: f64 = members
            .iter()
            .map(|&j| (disp[j] - mu) * (disp[j] - mu))
            .sum::<f64>()
            / m;
        let sd = var.sqrt();
        if sd == 0.0 {
            flat_bins += 1;
            continue;
        }
        for &j in members {
            z[j] = (disp[j] - mu) / sd;
        }
    }
    Ok((z, flat_bins))
}

fn excluded(name: &str, prefixes: &[String]) -> bool {
    prefixes.iter().any(|p| name.starts_with(p.as_str()))
}

/// Pool each sample's top genes by dispersion z-score into one
/// candidate set, excluding mitochondrial/ribosomal names. The result
/// is sorted by name.
pub fn select_hvgs(frames: &[ExpressionFrame], cfg: &HvgConfig) -> Result<Vec<String>> {
    if frames.is_empty() {
        return Err(Error::Dataset("no samples for gene selection".into()));
    }
    let mut pooled = BTreeSet::new();
    for frame in frames {
        let (z, _) = dispersion_z(frame, cfg.n_bins)?;
        let mut order: Vec<usize> = (0..z.len())
            .filter(|&j| !excluded(&frame.gene_names[j], &cfg.excluded_prefixes))
            .collect();
        order.sort_by(|&a, &b| {
            z[b].partial_cmp(&z[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(frame.gene_names[a].cmp(&frame.gene_names[b]))
        });
        for &j in order.iter().take(cfg.per_sample_top) {
            pooled.insert(frame.gene_names[j].clone());
        }
    }
    if pooled.is_empty() {
        return Err(Error::Dataset(
            "gene selection excluded every candidate".into(),
        ));
    }
    Ok(pooled.into_iter().collect())
}

/// Pooled per-gene mean and SD across all units of all frames,
/// restricted to `genes`. Frames must share gene panels.
fn pooled_stats(frames: &[ExpressionFrame], genes: &[String]) -> Result<BTreeMap<String, (f64, f64)>> {
    let mut sums: BTreeMap<&str, (f64, f64, f64)> = genes
        .iter()
        .map(|g| (g.as_str(), (0.0, 0.0, 0.0)))
        .collect();
    for frame in frames {
        if frame.space != Space::Log1p {
            return Err(Error::Contract(format!(
                "gene selection expects log1p values, frame is {}",
                frame.space.tag()
            )));
        }
        let (m, gw) = frame.values.dims2()?;
        for (j, name) in frame.gene_names.iter().enumerate() {
            let Some(acc) = sums.get_mut(name.as_str()) else {
                continue;
            };
            for i in 0..m {
                let v = frame.values.data()[i * gw + j];
                acc.0 += v;
                acc.1 += v * v;
                acc.2 += 1.0;
            }
        }
    }
    let mut out = BTreeMap::new();
    for (name, (s, s2, n)) in sums {
        if n == 0.0 {
            return Err(Error::Dataset(format!(
                "candidate gene {name:?} missing from every sample"
            )));
        }
        let mu = s / n;
        let var = (s2 / n - mu * mu).max(0.0);
        out.insert(name.to_string(), (mu, var.sqrt()));
    }
    Ok(out)
}

/// Final panel: Top-K by pooled mean intersected with Top-K by pooled
/// SD, restricted to the candidates. Ties break by gene name; the
/// result is sorted by name.
pub fn final_gene_set(
    candidates: &[String],
    frames: &[ExpressionFrame],
    k: usize,
) -> Result<Vec<String>> {
    if candidates.is_empty() {
        return Err(Error::Contract("candidate gene set is empty".into()));
    }
    if k == 0 {
        return Err(Error::Contract("K must be at least 1".into()));
    }
    let stats = pooled_stats(frames, candidates)?;
    let top_by = |pick: fn(&(f64, f64)) -> f64| -> BTreeSet<&str> {
        let mut order: Vec<&str> = stats.keys().map(String::as_str).collect();
        order.sort_by(|a, b| {
            pick(&stats[*b])
                .partial_cmp(&pick(&stats[*a]))
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(b))
        });
        order.into_iter().take(k).collect()
    };
    let by_mean = top_by(|s| s.0);
    let by_sd = top_by(|s| s.1);
    let chosen: Vec<String> = by_mean
        .intersection(&by_sd)
        .map(|s| s.to_string())
        .collect();
    if chosen.is_empty() {
        return Err(Error::Dataset(format!(
            "no gene is in both top-{k} mean and top-{k} SD; increase K"
        )));
    }
    Ok(chosen)
}

/// Keep the `cap` genes with the highest pooled dispersion z-score
/// (used when the mean/SD intersection is larger than wanted). Result
/// sorted by name.
pub fn cap_by_dispersion(
    genes: &[String],
    frames: &[ExpressionFrame],
    n_bins: usize,
    cap: usize,
) -> Result<Vec<String>> {
    if genes.len() <= cap {
        return Ok(genes.to_vec());
    }
    // Pool z-scores by averaging over the frames that carry the gene.
    let mut acc: BTreeMap<&str, (f64, f64)> =
        genes.iter().map(|g| (g.as_str(), (0.0, 0.0))).collect();
    for frame in frames {
        let (z, _) = dispersion_z(frame, n_bins)?;
        for (j, name) in frame.gene_names.iter().enumerate() {
            if let Some(e) = acc.get_mut(name.as_str()) {
                e.0 += z[j];
                e.1 += 1.0;
            }
        }
    }
    let mut order: Vec<&str> = acc.keys().copied().collect();
    let score = |g: &str| {
        let (s, n) = acc[g];
        if n > 0.0 {
            s / n
        } else {
            f64::NEG_INFINITY
        }
    };
    order.sort_by(|a, b| {
        score(b)
            .partial_cmp(&score(a))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    });
    let mut kept: Vec<String> = order.into_iter().take(cap).map(String::from).collect();
    kept.sort();
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn log_frame(values: Vec<Vec<f64>>, genes: Vec<&str>) -> ExpressionFrame {
        let frame = ExpressionFrame::new(
            (0..values.len()).map(|i| format!("u{i}")).collect(),
            None,
            Tensor::from_rows(&values).unwrap(),
            genes.into_iter().map(String::from).collect(),
            Space::RawCounts,
        )
        .unwrap();
        super::super::normalize::log1p_frame(&frame).unwrap()
    }

    #[test]
    fn identical_dispersions_give_zero_z() {
        // Two genes with identical columns: one bin, sd 0.
        let frame = log_frame(
            vec![vec![1.0, 1.0], vec![3.0, 3.0], vec![5.0, 5.0]],
            vec!["A", "B"],
        );
        let (z, flat) = dispersion_z(&frame, 1).unwrap();
        assert_eq!(z, vec![0.0, 0.0]);
        assert_eq!(flat, 1);
    }

    #[test]
    fn high_dispersion_gene_tops_its_bin() {
        // Three similar-mean genes; C swings much harder.
        let frame = log_frame(
            vec![
                vec![3.0, 4.0, 0.0],
                vec![4.0, 3.0, 9.0],
                vec![3.5, 3.5, 1.0],
            ],
            vec!["A", "B", "C"],
        );
        let (z, _) = dispersion_z(&frame, 1).unwrap();
        assert!(z[2] > z[0] && z[2] > z[1], "z = {z:?}");
        // Brute-force recompute: z inside one bin is (d - mu)/sd.
        let (_, disp) = super::gene_stats(&frame).unwrap();
        let mu = disp.iter().sum::<f64>() / 3.0;
        let sd = (disp.iter().map(|d| (d - mu) * (d - mu)).sum::<f64>() / 3.0).sqrt();
        for j in 0..3 {
            assert!((z[j] - (disp[j] - mu) / sd).abs() < 1e-12);
        }
    }

    #[test]
    fn mitochondrial_and_ribosomal_names_excluded() {
        let frame = log_frame(
            vec![
                vec![1.0, 1.0, 1.0, 8.0],
                vec![9.0, 9.0, 9.0, 2.0],
                vec![2.0, 2.0, 2.0, 5.0],
            ],
            vec!["MT-CO1", "RPS6", "RPL13", "ACTB"],
        );
        let picked = select_hvgs(&[frame], &HvgConfig::default()).unwrap();
        assert_eq!(picked, vec!["ACTB".to_string()]);
    }

    #[test]
    fn final_set_keeps_all_candidates_when_k_covers_them() {
        let frame = log_frame(
            vec![vec![1.0, 5.0], vec![2.0, 9.0], vec![3.0, 2.0]],
            vec!["A", "B"],
        );
        let cands = vec!["A".to_string(), "B".to_string()];
        let out = final_gene_set(&cands, &[frame], 2).unwrap();
        assert_eq!(out, cands);
    }

    #[test]
    fn disjoint_mean_and_sd_leaders_error_at_k1() {
        // A: high mean, zero SD. B: low mean, high SD.
        let frame = log_frame(
            vec![vec![50.0, 0.0], vec![50.0, 9.0], vec![50.0, 0.0]],
            vec!["A", "B"],
        );
        let cands = vec!["A".to_string(), "B".to_string()];
        let err = final_gene_set(&cands, &[frame], 1).unwrap_err();
        assert!(err.to_string().contains("increase K"), "{err}");
    }

    #[test]
    fn cap_keeps_most_dispersed() {
        let frame = log_frame(
            vec![
                vec![3.0, 4.0, 0.0, 2.0],
                vec![4.0, 3.0, 9.0, 2.0],
                vec![3.5, 3.5, 1.0, 2.0],
            ],
            vec!["A", "B", "C", "D"],
        );
        let genes: Vec<String> = ["A", "B", "C", "D"].iter().map(|s| s.to_string()).collect();
        let kept = cap_by_dispersion(&genes, &[frame], 1, 2).unwrap();
        assert_eq!(kept.len(), 2);
        assert!(kept.contains(&"C".to_string()));
    }

    #[test]
    fn scaling_counts_never_reorders_within_a_bin() {
        // Well-separated means so binning is stable; distinct
        // dispersions within each bin.
        let base = vec![
            vec![1.0, 2.0, 100.0, 90.0],
            vec![3.0, 1.0, 160.0, 120.0],
            vec![2.0, 4.0, 130.0, 80.0],
            vec![1.5, 2.5, 145.0, 110.0],
        ];
        let genes = vec!["A", "B", "C", "D"];
        let frame1 = log_frame(base.clone(), genes.clone());
        let scaled: Vec<Vec<f64>> = base
            .iter()
            .map(|r| r.iter().map(|v| v * 7.0).collect())
            .collect();
        let frame2 = log_frame(scaled, genes);
        let (z1, _) = dispersion_z(&frame1, 2).unwrap();
        let (z2, _) = dispersion_z(&frame2, 2).unwrap();
        // Bin 1 = {A, B}, bin 2 = {C, D} under both scalings.
        assert_eq!(z1[0] < z1[1], z2[0] < z2[1]);
        assert_eq!(z1[2] < z1[3], z2[2] < z2[3]);
    }
}
