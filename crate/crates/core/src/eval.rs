//! Prediction quality metrics and cross-validation protocols.
//!
//! Metrics operate in log1p space: per-unit correlation across genes,
//! per-gene correlation across units, and Jensen-Shannon divergence
//! between renormalized expression profiles. Protocols cut folds by
//! sample (leave-one-out, seeded 4:1) or by spatial strip, train one
//! model per fold, and aggregate held-out predictions.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ingest::tsv::write_atomic;
use crate::pipeline::{
    predict_fold, sample_fold, spatial_fold, train_fold, Dataset, PipelineConfig,
};
use crate::tensor::Tensor;

pub const JS_EPS: f64 = 1e-12;

/// Space tag recorded alongside every metric; predictions are mapped
/// back to log1p counts before scoring.
pub const EVAL_SPACE: &str = "log1p";

// ── metrics ──

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return f64::NAN;
    }
    (cov / (va * vb).sqrt()).clamp(-1.0, 1.0)
}

/// Pearson correlation across genes of one unit's predicted and true
/// profiles. NaN when either side is constant.
pub fn pcc_overall(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    if y.len() != y_hat.len() {
        return Err(Error::Dimension(format!(
            "profile lengths differ: {} vs {}",
            y.len(),
            y_hat.len()
        )));
    }
    if y.len() < 2 {
        return Err(Error::Metric(format!(
            "per-unit correlation needs at least 2 genes, got {}",
            y.len()
        )));
    }
    Ok(pearson(y, y_hat))
}

/// Column-wise Pearson correlation across units, one value per gene.
/// Fewer than two units leaves every column undefined (NaN); constant
/// columns are NaN and counted by the report.
pub fn pcc_gene(truth: &Tensor, pred: &Tensor) -> Result<Vec<f64>> {
    if truth.shape() != pred.shape() {
        return Err(Error::Dimension(format!(
            "matrix shapes differ: {:?} vs {:?}",
            truth.shape(),
            pred.shape()
        )));
    }
    if truth.shape().len() != 2 {
        return Err(Error::Dimension("per-gene correlation needs matrices".into()));
    }
    let (m, g) = (truth.shape()[0], truth.shape()[1]);
    if m < 2 {
        return Ok(vec![f64::NAN; g]);
    }
    let mut out = Vec::with_capacity(g);
    for j in 0..g {
        let col_t: Vec<f64> = (0..m).map(|i| truth.data()[i * g + j]).collect();
        let col_p: Vec<f64> = (0..m).map(|i| pred.data()[i * g + j]).collect();
        out.push(pearson(&col_t, &col_p));
    }
    Ok(out)
}

fn to_simplex(v: &[f64]) -> Result<Vec<f64>> {
    let clamped: Vec<f64> = v.iter().map(|&x| x.max(0.0)).collect();
    let total: f64 = clamped.iter().sum();
    if total <= 0.0 {
        return Err(Error::Metric(
            "cannot renormalize an all-zero vector to a distribution".into(),
        ));
    }
    let total = total + JS_EPS * clamped.len() as f64;
    Ok(clamped.iter().map(|&x| (x + JS_EPS) / total).collect())
}

/// Jensen-Shannon divergence between two profiles after clamping
/// negatives and renormalizing. Natural log; symmetric; in [0, ln 2].
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Dimension(format!(
            "profile lengths differ: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    if p.is_empty() {
        return Err(Error::Metric("empty profiles".into()));
    }
    let p = to_simplex(p)?;
    let q = to_simplex(q)?;
    let mut js = 0.0;
    for (&pi, &qi) in p.iter().zip(&q) {
        let m = 0.5 * (pi + qi);
        js += 0.5 * pi * (pi / m).ln() + 0.5 * qi * (qi / m).ln();
    }
    Ok(js.max(0.0))
}

// ── report assembly ──

/// Mean and population SD over the finite entries; the third value
/// counts the NaN entries skipped.
pub fn mean_sd_skip_nan(xs: &[f64]) -> (f64, f64, usize) {
    let kept: Vec<f64> = xs.iter().copied().filter(|v| !v.is_nan()).collect();
    let skipped = xs.len() - kept.len();
    if kept.is_empty() {
        return (f64::NAN, f64::NAN, skipped);
    }
    let n = kept.len() as f64;
    let mean = kept.iter().sum::<f64>() / n;
    let var = kept.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt(), skipped)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub unit_ids: Vec<String>,
    pub gene_names: Vec<String>,
    pub per_unit_pcc: Vec<f64>,
    pub per_unit_js: Vec<f64>,
    pub per_gene_pcc: Vec<f64>,
    pub pcc_overall_mean: f64,
    pub pcc_overall_sd: f64,
    pub pcc_overall_skipped: usize,
    pub pcc_gene_mean: f64,
    pub pcc_gene_sd: f64,
    pub pcc_gene_skipped: usize,
    pub js_mean: f64,
    pub js_sd: f64,
    pub js_skipped: usize,
    pub space: String,
}

/// Score a block of held-out predictions against truth, both M×G in
/// the same space. Degenerate units (constant profile, all-zero truth
/// or prediction) score NaN and are skip-counted rather than aborting
/// the report.
pub fn evaluate(
    truth: &Tensor,
    pred: &Tensor,
    unit_ids: &[String],
    gene_names: &[String],
    space: &str,
) -> Result<EvalReport> {
    if truth.shape() != pred.shape() || truth.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "evaluation needs matching matrices, got {:?} vs {:?}",
            truth.shape(),
            pred.shape()
        )));
    }
    let (m, g) = (truth.shape()[0], truth.shape()[1]);
    if unit_ids.len() != m || gene_names.len() != g {
        return Err(Error::Dimension(format!(
            "{m}x{g} values but {} unit ids and {} gene names",
            unit_ids.len(),
            gene_names.len()
        )));
    }
    if m == 0 {
        return Err(Error::Metric("no units to score".into()));
    }
    let mut per_unit_pcc = Vec::with_capacity(m);
    let mut per_unit_js = Vec::with_capacity(m);
    for i in 0..m {
        let row_t = &truth.data()[i * g..(i + 1) * g];
        let row_p = &pred.data()[i * g..(i + 1) * g];
        per_unit_pcc.push(pcc_overall(row_t, row_p)?);
        per_unit_js.push(match js_divergence(row_t, row_p) {
            Ok(v) => v,
            Err(Error::Metric(_)) => f64::NAN,
            Err(e) => return Err(e),
        });
    }
    let per_gene_pcc = pcc_gene(truth, pred)?;
    let (pm, ps, pk) = mean_sd_skip_nan(&per_unit_pcc);
    let (gm, gs, gk) = mean_sd_skip_nan(&per_gene_pcc);
    let (jm, js, jk) = mean_sd_skip_nan(&per_unit_js);
    Ok(EvalReport {
        unit_ids: unit_ids.to_vec(),
        gene_names: gene_names.to_vec(),
        per_unit_pcc,
        per_unit_js,
        per_gene_pcc,
        pcc_overall_mean: pm,
        pcc_overall_sd: ps,
        pcc_overall_skipped: pk,
        pcc_gene_mean: gm,
        pcc_gene_sd: gs,
        pcc_gene_skipped: gk,
        js_mean: jm,
        js_sd: js,
        js_skipped: jk,
        space: space.to_string(),
    })
}

// ── protocols ──

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Protocol {
    /// One fold per sample, testing on the held-out sample.
    LeaveOneOut,
    /// A single seeded 80/20 sample split.
    Split41 { seed: u64 },
    /// Five contiguous x-axis strips of one slide.
    Spatial5Fold,
}

impl Protocol {
    pub fn tag(&self) -> &'static str {
        match self {
            Protocol::LeaveOneOut => "loo",
            Protocol::Split41 { .. } => "split_4_1",
            Protocol::Spatial5Fold => "spatial_5fold",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub test_units: usize,
    pub epochs_trained: usize,
    pub best_val_loss: f64,
    pub pcc_overall_mean: f64,
    pub pcc_gene_mean: f64,
    pub js_mean: f64,
}

#[derive(Debug, Clone)]
pub struct ProtocolReport {
    pub protocol: String,
    pub folds: Vec<FoldSummary>,
    /// Metrics over the concatenation of every fold's held-out units.
    pub aggregate: EvalReport,
}

enum FoldCut {
    Samples { train: Vec<usize>, test: Vec<usize> },
    Strip { lo: f64, hi: f64 },
}

/// Six strip edges cutting the cell x-extent at its 0.2/0.4/0.6/0.8
/// points, with open outer boundaries.
pub fn spatial_strip_edges(xs: &[f64]) -> [f64; 6] {
    let x_min = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let x_max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = x_max - x_min;
    [
        f64::NEG_INFINITY,
        x_min + 0.2 * range,
        x_min + 0.4 * range,
        x_min + 0.6 * range,
        x_min + 0.8 * range,
        f64::INFINITY,
    ]
}

fn plan_folds(ds: &Dataset, protocol: Protocol) -> Result<Vec<FoldCut>> {
    let s = ds.samples.len();
    match protocol {
        Protocol::LeaveOneOut => {
            if s < 2 {
                return Err(Error::Protocol(format!(
                    "leave-one-out needs at least 2 samples, got {s}"
                )));
            }
            Ok((0..s)
                .map(|i| FoldCut::Samples {
                    train: (0..s).filter(|&j| j != i).collect(),
                    test: vec![i],
                })
                .collect())
        }
        Protocol::Split41 { seed } => {
            if s < 2 {
                return Err(Error::Protocol(format!(
                    "a 4:1 split needs at least 2 samples, got {s}"
                )));
            }
            let mut order: Vec<usize> = (0..s).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let n_test = ((s as f64 / 5.0).round() as usize).clamp(1, s - 1);
            let test: Vec<usize> = order[..n_test].to_vec();
            let train: Vec<usize> = order[n_test..].to_vec();
            Ok(vec![FoldCut::Samples { train, test }])
        }
        Protocol::Spatial5Fold => {
            if s != 1 {
                return Err(Error::Protocol(format!(
                    "spatial five-fold runs on a single slide, got {s} samples"
                )));
            }
            let xs: Vec<f64> = ds.samples[0].table.coords.iter().map(|&(x, _)| x).collect();
            let edges = spatial_strip_edges(&xs);
            Ok((0..5)
                .map(|f| FoldCut::Strip {
                    lo: edges[f],
                    hi: edges[f + 1],
                })
                .collect())
        }
    }
}

struct FoldRun {
    summary: FoldSummary,
    ids: Vec<String>,
    preds: Vec<f64>,
    truths: Vec<f64>,
}

/// Train one model per fold and score held-out predictions in log1p
/// space. Folds run in parallel with per-fold seeds offset from
/// `cfg.train.seed`.
pub fn run_protocol(
    ds: &Dataset,
    protocol: Protocol,
    cfg: &PipelineConfig,
) -> Result<ProtocolReport> {
    let plans = plan_folds(ds, protocol)?;
    let runs: Vec<FoldRun> = plans
        .par_iter()
        .enumerate()
        .map(|(f, cut)| -> Result<FoldRun> {
            let mut fold_cfg = cfg.clone();
            fold_cfg.train.seed = cfg.train.seed.wrapping_add(f as u64);
            let mut fold = match cut {
                FoldCut::Samples { train, test } => sample_fold(ds, train, test, &fold_cfg)?,
                FoldCut::Strip { lo, hi } => spatial_fold(ds, 0, *lo, *hi, &fold_cfg)?,
            };
            let history = train_fold(&mut fold, &fold_cfg)?;
            let (ids, preds, truths) = predict_fold(&fold.tree, &fold.test)?;
            let report = evaluate(&truths, &preds, &ids, &ds.genes, EVAL_SPACE)?;
            let best_val = history
                .iter()
                .map(|e| e.val_loss)
                .fold(f64::INFINITY, f64::min);
            Ok(FoldRun {
                summary: FoldSummary {
                    fold: f,
                    test_units: ids.len(),
                    epochs_trained: history.len(),
                    best_val_loss: if best_val.is_finite() { best_val } else { f64::NAN },
                    pcc_overall_mean: report.pcc_overall_mean,
                    pcc_gene_mean: report.pcc_gene_mean,
                    js_mean: report.js_mean,
                },
                ids,
                preds: preds.into_data(),
                truths: truths.into_data(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let g = ds.genes.len();
    let mut ids = Vec::new();
    let mut preds = Vec::new();
    let mut truths = Vec::new();
    let mut folds = Vec::new();
    for run in runs {
        ids.extend(run.ids);
        preds.extend(run.preds);
        truths.extend(run.truths);
        folds.push(run.summary);
    }
    let m = ids.len();
    let aggregate = evaluate(
        &Tensor::new(vec![m, g], truths)?,
        &Tensor::new(vec![m, g], preds)?,
        &ids,
        &ds.genes,
        EVAL_SPACE,
    )?;
    Ok(ProtocolReport {
        protocol: protocol.tag().to_string(),
        folds,
        aggregate,
    })
}

// ── report files ──

/// Tab-separated report: one `unit` row per held-out unit (PCC and
/// JS), then one `gene` row per gene (PCC across units).
pub fn write_eval_report(path: &Path, report: &EvalReport) -> Result<()> {
    let mut out = String::from("kind\tid\tpcc\tjs\n");
    for (i, id) in report.unit_ids.iter().enumerate() {
        out.push_str(&format!(
            "unit\t{id}\t{}\t{}\n",
            report.per_unit_pcc[i], report.per_unit_js[i]
        ));
    }
    for (j, gene) in report.gene_names.iter().enumerate() {
        out.push_str(&format!("gene\t{gene}\t{}\t\n", report.per_gene_pcc[j]));
    }
    write_atomic(path, out.as_bytes())
}

#[derive(Serialize)]
struct StatBlock {
    mean: f64,
    sd: f64,
    skipped: usize,
}

#[derive(Serialize)]
struct SummaryDoc<'a> {
    protocol: &'a str,
    space: &'a str,
    n_folds: usize,
    n_units: usize,
    n_genes: usize,
    pcc_overall: StatBlock,
    pcc_gene: StatBlock,
    js: StatBlock,
    folds: &'a [FoldSummary],
}

/// Machine-readable protocol summary. NaN statistics serialize as
/// null.
pub fn write_summary(path: &Path, report: &ProtocolReport) -> Result<()> {
    let a = &report.aggregate;
    let doc = SummaryDoc {
        protocol: &report.protocol,
        space: &a.space,
        n_folds: report.folds.len(),
        n_units: a.unit_ids.len(),
        n_genes: a.gene_names.len(),
        pcc_overall: StatBlock {
            mean: a.pcc_overall_mean,
            sd: a.pcc_overall_sd,
            skipped: a.pcc_overall_skipped,
        },
        pcc_gene: StatBlock {
            mean: a.pcc_gene_mean,
            sd: a.pcc_gene_sd,
            skipped: a.pcc_gene_skipped,
        },
        js: StatBlock {
            mean: a.js_mean,
            sd: a.js_sd,
            skipped: a.js_skipped,
        },
        folds: &report.folds,
    };
    let body = serde_json::to_string_pretty(&doc)
        .map_err(|e| Error::Parse(format!("summary serialization: {e}")))?;
    write_atomic(path, body.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    // ── metric oracles ──

    fn oracle_pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(&x, &y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|&x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|&y| (y - mb).powi(2)).sum();
        cov / (va.sqrt() * vb.sqrt())
    }

    fn oracle_js(p: &[f64], q: &[f64]) -> f64 {
        let norm = |v: &[f64]| -> Vec<f64> {
            let c: Vec<f64> = v.iter().map(|&x| x.max(0.0) + 1e-12).collect();
            let s: f64 = c.iter().sum();
            c.iter().map(|&x| x / s).collect()
        };
        let p = norm(p);
        let q = norm(q);
        let kl = |a: &[f64], b: &[f64]| -> f64 {
            a.iter().zip(b).map(|(&x, &y)| x * (x / y).ln()).sum()
        };
        let m: Vec<f64> = p.iter().zip(&q).map(|(&x, &y)| 0.5 * (x + y)).collect();
        0.5 * kl(&p, &m) + 0.5 * kl(&q, &m)
    }

    #[test]
    fn pcc_hand_examples() {
        assert!((pcc_overall(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pcc_overall(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        let r = pcc_overall(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-12, "{r}");
    }

    #[test]
    fn pcc_needs_two_genes_and_nans_on_constant() {
        assert!(matches!(
            pcc_overall(&[1.0], &[2.0]),
            Err(Error::Metric(_))
        ));
        assert!(pcc_overall(&[1.0, 1.0], &[0.5, 2.0]).unwrap().is_nan());
        assert!(pcc_overall(&[0.5, 2.0], &[3.0, 3.0]).unwrap().is_nan());
    }

    #[test]
    fn pcc_affine_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..100 {
            let g = rng.gen_range(2..12);
            let y: Vec<f64> = (0..g).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let yh: Vec<f64> = (0..g).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let a = rng.gen_range(0.1..5.0);
            let b = rng.gen_range(-4.0..4.0);
            let scaled: Vec<f64> = yh.iter().map(|&v| a * v + b).collect();
            let r0 = pcc_overall(&y, &yh).unwrap();
            let r1 = pcc_overall(&y, &scaled).unwrap();
            if r0.is_nan() {
                assert!(r1.is_nan());
            } else {
                assert!((r0 - r1).abs() < 1e-12, "{r0} vs {r1}");
            }
        }
    }

    #[test]
    fn pcc_gene_matches_columnwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let (m, g) = (rng.gen_range(2..7), rng.gen_range(1..5));
            let t = Tensor::new(
                vec![m, g],
                (0..m * g).map(|_| rng.gen_range(-2.0..4.0)).collect(),
            )
            .unwrap();
            let p = Tensor::new(
                vec![m, g],
                (0..m * g).map(|_| rng.gen_range(-2.0..4.0)).collect(),
            )
            .unwrap();
            let got = pcc_gene(&t, &p).unwrap();
            for j in 0..g {
                let ct: Vec<f64> = (0..m).map(|i| t.data()[i * g + j]).collect();
                let cp: Vec<f64> = (0..m).map(|i| p.data()[i * g + j]).collect();
                let want = oracle_pearson(&ct, &cp);
                assert!((got[j] - want).abs() < 1e-12, "col {j}: {} vs {want}", got[j]);
            }
        }
    }

    #[test]
    fn pcc_gene_constant_column_is_skipped_nan() {
        let t = Tensor::new(vec![3, 2], vec![1.0, 5.0, 1.0, 6.0, 1.0, 7.0]).unwrap();
        let p = Tensor::new(vec![3, 2], vec![0.1, 5.1, 0.3, 6.2, 0.2, 6.9]).unwrap();
        let cols = pcc_gene(&t, &p).unwrap();
        assert!(cols[0].is_nan());
        assert!(cols[1] > 0.9);
        let (_, _, skipped) = mean_sd_skip_nan(&cols);
        assert_eq!(skipped, 1);
    }

    #[test]
    fn pcc_gene_single_unit_is_all_nan() {
        let t = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let cols = pcc_gene(&t, &t).unwrap();
        assert!(cols.iter().all(|v| v.is_nan()));
    }

    #[test]
    fn js_identity_is_exactly_zero() {
        let p = [0.2, 0.5, 0.3];
        assert_eq!(js_divergence(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn js_hand_value() {
        let v = js_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((v - 0.215_761_554_338_835_65).abs() < 1e-6, "{v}");
    }

    #[test]
    fn js_symmetric_bounded_and_clamps_negatives() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let ln2 = std::f64::consts::LN_2;
        for _ in 0..200 {
            let g = rng.gen_range(1..10);
            let p: Vec<f64> = (0..g).map(|_| rng.gen_range(-0.2..2.0)).collect();
            let q: Vec<f64> = (0..g).map(|_| rng.gen_range(-0.2..2.0)).collect();
            if p.iter().all(|&x| x <= 0.0) || q.iter().all(|&x| x <= 0.0) {
                continue;
            }
            let a = js_divergence(&p, &q).unwrap();
            let b = js_divergence(&q, &p).unwrap();
            assert!((a - b).abs() < 1e-12);
            assert!(a >= 0.0 && a <= ln2 + 1e-12, "{a}");
        }
        // A negative entry behaves as zero mass.
        let with_neg = js_divergence(&[1.0, -3.0], &[0.5, 0.5]).unwrap();
        let clamped = js_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((with_neg - clamped).abs() < 1e-15);
    }

    #[test]
    fn js_all_zero_is_a_metric_error() {
        assert!(matches!(
            js_divergence(&[0.0, 0.0], &[0.5, 0.5]),
            Err(Error::Metric(_))
        ));
        assert!(matches!(
            js_divergence(&[0.5, 0.5], &[-1.0, 0.0]),
            Err(Error::Metric(_))
        ));
    }

    #[test]
    fn metrics_match_oracles_on_random_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for _ in 0..1000 {
            let g = rng.gen_range(2..16);
            let y: Vec<f64> = (0..g).map(|_| rng.gen_range(0.0..5.0)).collect();
            let yh: Vec<f64> = (0..g).map(|_| rng.gen_range(-1.0..5.0)).collect();
            let r = pcc_overall(&y, &yh).unwrap();
            let want = oracle_pearson(&y, &yh);
            if want.is_nan() {
                assert!(r.is_nan());
            } else {
                assert!((r - want).abs() < 1e-10);
            }
            if y.iter().any(|&v| v > 0.0) && yh.iter().any(|&v| v > 0.0) {
                let j = js_divergence(&y, &yh).unwrap();
                assert!((j - oracle_js(&y, &yh)).abs() < 1e-10);
            }
        }
    }

    // ── report assembly ──

    fn names(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    #[test]
    fn evaluate_assembles_and_skips_degenerates() {
        // Unit 2 has constant truth (PCC NaN) and an all-negative
        // prediction row is impossible here, so force a zero-truth JS
        // skip with unit 3.
        let truth = Tensor::new(
            vec![4, 3],
            vec![
                1.0, 2.0, 3.0, //
                3.0, 1.0, 2.0, //
                5.0, 5.0, 5.0, //
                0.0, 0.0, 0.0,
            ],
        )
        .unwrap();
        let pred = Tensor::new(
            vec![4, 3],
            vec![
                1.1, 2.2, 2.9, //
                2.8, 0.9, 2.1, //
                4.0, 5.0, 6.0, //
                0.5, 0.25, 0.25,
            ],
        )
        .unwrap();
        let rep = evaluate(&truth, &pred, &names("u", 4), &names("g", 3), "log1p").unwrap();
        assert_eq!(rep.pcc_overall_skipped, 2);
        assert_eq!(rep.js_skipped, 1);
        assert!(rep.per_unit_pcc[0] > 0.9);
        assert!(rep.per_unit_js[0] < 0.05);
        assert_eq!(rep.space, "log1p");
        let finite: Vec<f64> = rep.per_unit_pcc.iter().copied().filter(|v| !v.is_nan()).collect();
        let mean = finite.iter().sum::<f64>() / finite.len() as f64;
        assert!((rep.pcc_overall_mean - mean).abs() < 1e-12);
    }

    #[test]
    fn report_files_are_deterministic(){
        let truth = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 3.0, 2.0, 1.0]).unwrap();
        let pred = Tensor::new(vec![2, 3], vec![1.0, 2.5, 2.9, 3.2, 1.9, 1.1]).unwrap();
        let rep = evaluate(&truth, &pred, &names("u", 2), &names("g", 3), "log1p").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.tsv");
        let p2 = dir.path().join("b.tsv");
        write_eval_report(&p1, &rep).unwrap();
        write_eval_report(&p2, &rep).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        assert_eq!(b1, std::fs::read(&p2).unwrap());
        let text = String::from_utf8(b1).unwrap();
        assert!(text.starts_with("kind\tid\tpcc\tjs\n"));
        assert_eq!(text.lines().count(), 1 + 2 + 3);
        let report = ProtocolReport {
            protocol: "loo".into(),
            folds: vec![],
            aggregate: rep,
        };
        let s1 = dir.path().join("s1.json");
        let s2 = dir.path().join("s2.json");
        write_summary(&s1, &report).unwrap();
        write_summary(&s2, &report).unwrap();
        assert_eq!(std::fs::read(&s1).unwrap(), std::fs::read(&s2).unwrap());
        let parsed: serde_json::Value =
            serde_json::from_slice(&std::fs::read(&s1).unwrap()).unwrap();
        assert_eq!(parsed["protocol"], "loo");
        assert_eq!(parsed["space"], "log1p");
        assert_eq!(parsed["n_units"], 2);
    }

    // ── protocols on planted data ──

    use crate::ingest::manifest::TaskKind;
    use crate::model::ModelConfig;
    use crate::pipeline::load_dataset;
    use crate::synth::{generate, PlantedWorld, SynthSpec};
    use crate::train::TrainConfig;

    fn tiny_cfg() -> PipelineConfig {
        PipelineConfig {
            model: ModelConfig {
                d_model: 4,
                gat_layers: 1,
                gat_heads: 2,
                leaky_slope: 0.2,
                knn_k: 3,
                trf_layers: 1,
                trf_heads: 2,
                d_ff: 8,
                n_pos: 16,
                d_readout: 4,
                use_softplus: false,
                k_clusters: 2,
                normalize: true,
            },
            train: TrainConfig {
                lr: 1e-3,
                epochs: 1,
                batch_size: 8,
                lambda: 0.0,
                ..TrainConfig::default()
            },
            pca_dim: 0,
            hvg_k: 6,
            hvg_cap: 0,
            max_bulk_cells: 64,
            val_fraction: 0.25,
        }
    }

    fn synth_on_disk(task: TaskKind, n_samples: usize, spots: usize) -> (tempfile::TempDir, Dataset) {
        let world = PlantedWorld::new(5, 4, 6, 3, 0.1).unwrap();
        let spec = SynthSpec {
            n_samples,
            spots_per_sample: spots,
            cells_per_spot: 3,
        };
        let dir = tempfile::tempdir().unwrap();
        generate(&world, &spec, task, "s", dir.path()).unwrap();
        let ds = load_dataset(&dir.path().join("manifest.json"), &tiny_cfg()).unwrap();
        (dir, ds)
    }

    #[test]
    fn loo_runs_one_fold_per_sample() {
        let (_dir, ds) = synth_on_disk(TaskKind::Spot, 3, 9);
        let rep = run_protocol(&ds, Protocol::LeaveOneOut, &tiny_cfg()).unwrap();
        assert_eq!(rep.protocol, "loo");
        assert_eq!(rep.folds.len(), 3);
        assert_eq!(rep.aggregate.unit_ids.len(), 27);
        for f in &rep.folds {
            assert_eq!(f.test_units, 9);
            assert_eq!(f.epochs_trained, 1);
        }
    }

    #[test]
    fn loo_on_one_sample_is_a_protocol_error() {
        let (_dir, ds) = synth_on_disk(TaskKind::Spot, 1, 9);
        assert!(matches!(
            run_protocol(&ds, Protocol::LeaveOneOut, &tiny_cfg()),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn split41_is_seeded_and_reproducible() {
        let (_dir, ds) = synth_on_disk(TaskKind::Spot, 5, 4);
        let a = run_protocol(&ds, Protocol::Split41 { seed: 9 }, &tiny_cfg()).unwrap();
        let b = run_protocol(&ds, Protocol::Split41 { seed: 9 }, &tiny_cfg()).unwrap();
        assert_eq!(a.folds.len(), 1);
        assert_eq!(a.aggregate.unit_ids, b.aggregate.unit_ids);
        assert_eq!(a.aggregate.per_unit_pcc.len(), b.aggregate.per_unit_pcc.len());
        for (x, y) in a.aggregate.per_unit_pcc.iter().zip(&b.aggregate.per_unit_pcc) {
            assert!(x.to_bits() == y.to_bits());
        }
        // 5 samples → 1 test sample.
        assert_eq!(a.folds[0].test_units, 4);
    }

    #[test]
    fn spatial_5fold_covers_every_spot_once() {
        let (_dir, ds) = synth_on_disk(TaskKind::Spot, 1, 25);
        let rep = run_protocol(&ds, Protocol::Spatial5Fold, &tiny_cfg()).unwrap();
        assert_eq!(rep.folds.len(), 5);
        let mut ids = rep.aggregate.unit_ids.clone();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 25, "every spot tested exactly once");
    }

    #[test]
    fn spatial_5fold_needs_a_single_sample() {
        let (_dir, ds) = synth_on_disk(TaskKind::Spot, 2, 25);
        assert!(matches!(
            run_protocol(&ds, Protocol::Spatial5Fold, &tiny_cfg()),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn strip_boundaries_match_the_extent_quantiles() {
        let (_dir, ds) = synth_on_disk(TaskKind::Spot, 1, 25);
        let plans = plan_folds(&ds, Protocol::Spatial5Fold).unwrap();
        let xs: Vec<f64> = ds.samples[0].table.coords.iter().map(|&(x, _)| x).collect();
        let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (f, plan) in plans.iter().enumerate() {
            if let FoldCut::Strip { lo: a, hi: b } = plan {
                if f > 0 {
                    let want = lo + 0.2 * f as f64 * (hi - lo);
                    assert!((a - want).abs() < 1e-9);
                }
                if f < 4 {
                    let want = lo + 0.2 * (f + 1) as f64 * (hi - lo);
                    assert!((b - want).abs() < 1e-9);
                }
            } else {
                panic!("expected strips");
            }
        }
    }
}
