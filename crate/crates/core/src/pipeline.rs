//! End-to-end assembly: manifest to gene panel to normalized bag sets
//! to a fitted model, with folds cut by sample or by spatial strip.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ingest::bags::{assign_cells_to_spots, grid_bulk_bags, BagSet};
use crate::ingest::hvg::{cap_by_dispersion, final_gene_set, select_hvgs, HvgConfig};
use crate::ingest::manifest::{load_manifest, load_samples, read_gene_list, TaskKind};
use crate::ingest::normalize::{
    denormalize_values, fit_norm_stats, log1p_frame, normalize_values,
};
use crate::ingest::pca::{fit_pca, install_pca};
use crate::ingest::tsv::{CellTable, ExpressionFrame};
use crate::model::{init_params, predict, ModelConfig};
use crate::params::{Extent, NormStats, ParamTree};
use crate::tensor::Tensor;
use crate::train::{fit, prepare_phenotypes, EpochStats, TrainConfig};

pub const DEFAULT_MAX_BULK_CELLS: usize = 4096;
pub const DEFAULT_HVG_K: usize = 64;
pub const DEFAULT_VAL_FRACTION: f64 = 0.2;

#[derive(Debug, Clone)]
pub struct SampleData {
    /// Raw (uncompressed) cell features.
    pub table: CellTable,
    /// Raw counts restricted to the panel, in panel order.
    pub expr: ExpressionFrame,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub task: TaskKind,
    pub patch_px: f64,
    pub genes: Vec<String>,
    pub samples: Vec<SampleData>,
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// 0 disables compression; otherwise must equal `model.d_model`.
    pub pca_dim: usize,
    /// Top-K cut for the mean/SD intersection when no gene list is
    /// pinned by the manifest.
    pub hvg_k: usize,
    /// Cap on the final panel size by dispersion; 0 disables.
    pub hvg_cap: usize,
    pub max_bulk_cells: usize,
    /// Fraction of training bags held out for early stopping.
    pub val_fraction: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            model: ModelConfig::with_width(128),
            train: TrainConfig::default(),
            pca_dim: 128,
            hvg_k: DEFAULT_HVG_K,
            hvg_cap: 0,
            max_bulk_cells: DEFAULT_MAX_BULK_CELLS,
            val_fraction: DEFAULT_VAL_FRACTION,
        }
    }
}

/// Load a manifest and settle the gene panel: the manifest's pinned
/// list when present, otherwise variable-gene selection.
pub fn load_dataset(manifest_path: &Path, cfg: &PipelineConfig) -> Result<Dataset> {
    let desc = load_manifest(manifest_path)?;
    let raw = load_samples(&desc)?;
    let panel: Vec<String> = match &desc.genes {
        Some(list) => read_gene_list(list)?,
        None => {
            let logged: Vec<ExpressionFrame> = raw
                .iter()
                .map(|(_, e)| log1p_frame(e))
                .collect::<Result<_>>()?;
            let candidates = select_hvgs(&logged, &HvgConfig::default())?;
            let mut panel = final_gene_set(&candidates, &logged, cfg.hvg_k)?;
            if cfg.hvg_cap > 0 && panel.len() > cfg.hvg_cap {
                panel = cap_by_dispersion(&panel, &logged, HvgConfig::default().n_bins, cfg.hvg_cap)?;
            }
            panel
        }
    };
    let samples = raw
        .into_iter()
        .map(|(table, expr)| {
            Ok(SampleData {
                expr: expr.select_genes(&panel)?,
                table,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        task: desc.task,
        patch_px: desc.patch_px,
        genes: panel,
        samples,
    })
}

/// One protocol fold, staged and ready to fit. Training tables carry
/// compressed features and normalized targets; the test set keeps raw
/// features and log1p targets for honest-space evaluation.
#[derive(Debug, Clone)]
pub struct PreparedFold {
    pub tree: ParamTree,
    pub train: BagSet,
    pub val: BagSet,
    pub test: BagSet,
    pub stats: NormStats,
}

/// Bags for one sample in the task's shape: per-spot bags or one
/// gridded slide bag.
fn sample_bags(
    task: TaskKind,
    sample: &SampleData,
    patch_px: f64,
    max_cells: usize,
    seed: u64,
) -> Result<Vec<crate::ingest::bags::Bag>> {
    match task {
        TaskKind::Spot => {
            let (bags, _) = assign_cells_to_spots(&sample.table, &sample.expr, patch_px)?;
            Ok(bags)
        }
        TaskKind::Bulk => {
            let mut bag = grid_bulk_bags(&sample.table, patch_px, max_cells, seed)?;
            let g = sample.expr.n_genes();
            bag.target = Some(sample.expr.values.data()[..g].to_vec());
            Ok(vec![bag])
        }
    }
}

/// Targets arrive as raw counts; convert to the model's training
/// space: log1p, then z-score when normalization is on.
fn to_model_space(raw: &[f64], stats: &NormStats, normalize: bool) -> Result<Vec<f64>> {
    let logged: Vec<f64> = raw.iter().map(|v| v.ln_1p()).collect();
    if !normalize {
        return Ok(logged);
    }
    let t = Tensor::new(vec![1, logged.len()], logged)?;
    Ok(normalize_values(&t, stats)?.into_data())
}

fn log1p_vec(raw: &[f64]) -> Vec<f64> {
    raw.iter().map(|v| v.ln_1p()).collect()
}

/// Pooled per-gene stats over the training units of the given bags.
fn stats_from_bags(set: &BagSet) -> Result<NormStats> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (_, bag) in &set.bags {
        let t = bag
            .target
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("bag {} has no target", bag.unit_id)))?;
        rows.push(log1p_vec(t));
    }
    fit_norm_stats(&Tensor::from_rows(&rows)?)
}

struct FoldSplit {
    /// (sample index, bag) for training+validation.
    train: Vec<(usize, crate::ingest::bags::Bag)>,
    /// (sample index, bag) for test.
    test: Vec<(usize, crate::ingest::bags::Bag)>,
    /// Sample indices whose tables belong to the training side.
    train_tables: Vec<usize>,
    test_tables: Vec<usize>,
}

/// Stage a fold: fit stats, PCA, and phenotype centroids on the
/// training side only; compress features; normalize targets.
fn prepare_fold(ds: &Dataset, split: FoldSplit, cfg: &PipelineConfig) -> Result<PreparedFold> {
    if split.train.is_empty() {
        return Err(Error::Protocol("fold has no training bags".into()));
    }
    if split.test.is_empty() {
        return Err(Error::Protocol("fold has no test bags".into()));
    }
    cfg.model.validate()?;
    let seed = cfg.train.seed;

    // Raw-target stats come from the training bags alone.
    let mut raw_train = BagSet::new(
        split
            .train_tables
            .iter()
            .map(|&i| ds.samples[i].table.clone())
            .collect(),
    );
    let table_slot = |tables: &[usize], sample: usize| -> usize {
        tables.iter().position(|&t| t == sample).expect("sample indexed")
    };
    for (sample, bag) in &split.train {
        raw_train.push_bag(table_slot(&split.train_tables, *sample), bag.clone())?;
    }
    let stats = stats_from_bags(&raw_train)?;

    // Geometry and width checks.
    let mut all_coords: Vec<(f64, f64)> = Vec::new();
    for &i in &split.train_tables {
        all_coords.extend(ds.samples[i].table.coords.iter().copied());
    }
    let extent = Extent::from_points(&all_coords);
    let raw_width = ds.samples[split.train_tables[0]].table.feature_width();
    let effective = if cfg.pca_dim > 0 { cfg.pca_dim } else { raw_width };
    if effective != cfg.model.d_model {
        return Err(Error::Config(format!(
            "model width {} but cell features arrive {effective}-wide",
            cfg.model.d_model
        )));
    }

    let normalize = cfg.model.normalize;
    // Softplus constrains the readout to positive values; z-scored
    // targets are signed, so the two never combine.
    let mut model_cfg = cfg.model.clone();
    if normalize {
        model_cfg.use_softplus = false;
    }
    let arch = model_cfg.to_arch(
        ds.genes.clone(),
        extent,
        raw_width,
        cfg.pca_dim,
        if normalize { Some(stats.clone()) } else { None },
    );
    let mut tree = init_params(arch, seed)?;
    if cfg.pca_dim > 0 {
        let pooled = raw_train.pooled_features()?;
        let pca = fit_pca(&pooled, cfg.pca_dim)?;
        install_pca(&mut tree, &pca)?;
    }

    // Assemble model-space training bags and a bag-level validation
    // split.
    let mut train_set = BagSet::new(
        split
            .train_tables
            .iter()
            .map(|&i| ds.samples[i].table.clone())
            .collect(),
    );
    for (sample, bag) in &split.train {
        let mut bag = bag.clone();
        let raw = bag.target.as_ref().expect("training bag carries target");
        bag.target = Some(to_model_space(raw, &stats, normalize)?);
        train_set.push_bag(table_slot(&split.train_tables, *sample), bag)?;
    }
    train_set.compress(&tree)?;
    let mut val_set = BagSet::new(train_set.tables.clone());
    let n = train_set.n_bags();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ VAL_SPLIT_SALT));
    let n_val = ((n as f64 * cfg.val_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let val_ids: std::collections::BTreeSet<usize> = order[..n_val].iter().copied().collect();
    let mut kept = BagSet::new(train_set.tables.clone());
    for (i, (t, bag)) in train_set.bags.iter().enumerate() {
        if val_ids.contains(&i) {
            val_set.push_bag(*t, bag.clone())?;
        } else {
            kept.push_bag(*t, bag.clone())?;
        }
    }
    let mut train_set = kept;

    prepare_phenotypes(&mut tree, &mut train_set, &mut val_set, seed)?;

    // Test bags keep raw features and log1p truth.
    let mut test_set = BagSet::new(
        split
            .test_tables
            .iter()
            .map(|&i| ds.samples[i].table.clone())
            .collect(),
    );
    for (sample, bag) in &split.test {
        let mut bag = bag.clone();
        if let Some(raw) = bag.target.as_ref() {
            bag.target = Some(log1p_vec(raw));
        }
        test_set.push_bag(table_slot(&split.test_tables, *sample), bag)?;
    }
    Ok(PreparedFold {
        tree,
        train: train_set,
        val: val_set,
        test: test_set,
        stats,
    })
}

const VAL_SPLIT_SALT: u64 = 0x5eed_0ba6;

/// Sample-level fold: train on `train_samples`, test on `test_samples`.
pub fn sample_fold(
    ds: &Dataset,
    train_samples: &[usize],
    test_samples: &[usize],
    cfg: &PipelineConfig,
) -> Result<PreparedFold> {
    let mut train = Vec::new();
    for &i in train_samples {
        for bag in sample_bags(ds.task, &ds.samples[i], ds.patch_px, cfg.max_bulk_cells, cfg.train.seed)? {
            train.push((i, bag));
        }
    }
    let mut test = Vec::new();
    for &i in test_samples {
        for bag in sample_bags(ds.task, &ds.samples[i], ds.patch_px, cfg.max_bulk_cells, cfg.train.seed)? {
            test.push((i, bag));
        }
    }
    prepare_fold(
        ds,
        FoldSplit {
            train,
            test,
            train_tables: train_samples.to_vec(),
            test_tables: test_samples.to_vec(),
        },
        cfg,
    )
}

/// Spatial fold on a single-sample spot dataset: spots whose center x
/// falls in [lo, hi) are the test strip, the rest train.
pub fn spatial_fold(
    ds: &Dataset,
    sample: usize,
    lo: f64,
    hi: f64,
    cfg: &PipelineConfig,
) -> Result<PreparedFold> {
    if ds.task != TaskKind::Spot {
        return Err(Error::Protocol("spatial folds need a spot task".into()));
    }
    let bags = sample_bags(ds.task, &ds.samples[sample], ds.patch_px, cfg.max_bulk_cells, cfg.train.seed)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for bag in bags {
        let (x, _) = bag.unit_xy.expect("spot bags carry centers");
        if x >= lo && x < hi {
            test.push((sample, bag));
        } else {
            train.push((sample, bag));
        }
    }
    prepare_fold(
        ds,
        FoldSplit {
            train,
            test,
            train_tables: vec![sample],
            test_tables: vec![sample],
        },
        cfg,
    )
}

/// Fit the fold's model in place; returns the training history.
pub fn train_fold(fold: &mut PreparedFold, cfg: &PipelineConfig) -> Result<Vec<EpochStats>> {
    fit(&mut fold.tree, &fold.train, &fold.val, &cfg.train)
}

/// Load a dataset with a caller-pinned gene panel (a trained model's
/// gene order), skipping variable-gene selection.
pub fn load_dataset_with_panel(manifest_path: &Path, panel: &[String]) -> Result<Dataset> {
    let desc = load_manifest(manifest_path)?;
    let raw = load_samples(&desc)?;
    let samples = raw
        .into_iter()
        .map(|(table, expr)| {
            Ok(SampleData {
                expr: expr.select_genes(panel)?,
                table,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        task: desc.task,
        patch_px: desc.patch_px,
        genes: panel.to_vec(),
        samples,
    })
}

/// Training bags staged without a model: raw features, model-space
/// targets, and a seeded bag-level validation split.
#[derive(Debug, Clone)]
pub struct StagedTraining {
    pub train: BagSet,
    pub val: BagSet,
    pub stats: NormStats,
    pub extent: Extent,
    pub raw_width: usize,
}

pub fn stage_training(
    ds: &Dataset,
    samples: &[usize],
    normalize: bool,
    cfg: &PipelineConfig,
) -> Result<StagedTraining> {
    if samples.is_empty() {
        return Err(Error::Protocol("no training samples".into()));
    }
    let tables: Vec<CellTable> = samples.iter().map(|&i| ds.samples[i].table.clone()).collect();
    let mut raw = BagSet::new(tables.clone());
    for (slot, &i) in samples.iter().enumerate() {
        for bag in sample_bags(ds.task, &ds.samples[i], ds.patch_px, cfg.max_bulk_cells, cfg.train.seed)? {
            raw.push_bag(slot, bag)?;
        }
    }
    let stats = stats_from_bags(&raw)?;
    let mut staged = BagSet::new(tables.clone());
    for (slot, bag) in &raw.bags {
        let mut bag = bag.clone();
        let t = bag.target.as_ref().expect("training bag carries target");
        bag.target = Some(to_model_space(t, &stats, normalize)?);
        staged.push_bag(*slot, bag)?;
    }
    let n = staged.n_bags();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.train.seed ^ VAL_SPLIT_SALT));
    let n_val = ((n as f64 * cfg.val_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let val_ids: std::collections::BTreeSet<usize> = order[..n_val].iter().copied().collect();
    let mut train = BagSet::new(tables.clone());
    let mut val = BagSet::new(tables);
    for (i, (slot, bag)) in staged.bags.iter().enumerate() {
        if val_ids.contains(&i) {
            val.push_bag(*slot, bag.clone())?;
        } else {
            train.push_bag(*slot, bag.clone())?;
        }
    }
    let mut coords = Vec::new();
    for &i in samples {
        coords.extend(ds.samples[i].table.coords.iter().copied());
    }
    Ok(StagedTraining {
        train,
        val,
        stats,
        extent: Extent::from_points(&coords),
        raw_width: ds.samples[samples[0]].table.feature_width(),
    })
}

/// Initialize a model over staged training data: width checks, PCA
/// fit on the pooled raw training features, feature compression of
/// both splits, and phenotype centroids. The staged sets are
/// model-ready afterwards.
pub fn build_model(
    genes: Vec<String>,
    staged: &mut StagedTraining,
    cfg: &PipelineConfig,
) -> Result<ParamTree> {
    cfg.model.validate()?;
    let effective = if cfg.pca_dim > 0 { cfg.pca_dim } else { staged.raw_width };
    if effective != cfg.model.d_model {
        return Err(Error::Config(format!(
            "model width {} but cell features arrive {effective}-wide",
            cfg.model.d_model
        )));
    }
    let normalize = cfg.model.normalize;
    let mut model_cfg = cfg.model.clone();
    if normalize {
        model_cfg.use_softplus = false;
    }
    let arch = model_cfg.to_arch(
        genes,
        staged.extent,
        staged.raw_width,
        cfg.pca_dim,
        if normalize { Some(staged.stats.clone()) } else { None },
    );
    let mut tree = init_params(arch, cfg.train.seed)?;
    if cfg.pca_dim > 0 {
        let pooled = staged.train.pooled_features()?;
        let pca = fit_pca(&pooled, cfg.pca_dim)?;
        install_pca(&mut tree, &pca)?;
    }
    staged.train.compress(&tree)?;
    staged.val.compress(&tree)?;
    prepare_phenotypes(&mut tree, &mut staged.train, &mut staged.val, cfg.train.seed)?;
    Ok(tree)
}

/// Bags in evaluation form: raw features, log1p targets.
pub fn raw_bagset(ds: &Dataset, samples: &[usize], cfg: &PipelineConfig) -> Result<BagSet> {
    let tables: Vec<CellTable> = samples.iter().map(|&i| ds.samples[i].table.clone()).collect();
    let mut set = BagSet::new(tables);
    for (slot, &i) in samples.iter().enumerate() {
        for mut bag in sample_bags(ds.task, &ds.samples[i], ds.patch_px, cfg.max_bulk_cells, cfg.train.seed)? {
            if let Some(t) = bag.target.as_ref() {
                bag.target = Some(log1p_vec(t));
            }
            set.push_bag(slot, bag)?;
        }
    }
    Ok(set)
}

/// Label bags with the phenotype centroids already stored in the
/// tree, without refitting k-means (the transfer path keeps cluster
/// parameters frozen).
pub fn assign_phenotypes_from_tree(tree: &ParamTree, sets: &mut [&mut BagSet]) -> Result<()> {
    let centroids = tree.tensor("cluster.centroids")?.clone();
    let model = crate::cluster::PhenotypeModel {
        k: centroids.shape()[0],
        centroids,
    };
    for set in sets {
        set.assign_labels(&model);
    }
    Ok(())
}

/// Test-set predictions and truths in log1p space, one row per bag,
/// with unit ids.
pub fn predict_fold(
    tree: &ParamTree,
    test: &BagSet,
) -> Result<(Vec<String>, Tensor, Tensor)> {
    let g = tree.arch.n_genes();
    let m = test.n_bags();
    if m == 0 {
        return Err(Error::Protocol("no test bags to score".into()));
    }
    let mut ids = Vec::with_capacity(m);
    let mut preds = Vec::with_capacity(m * g);
    let mut truths = Vec::with_capacity(m * g);
    for i in 0..m {
        let bag = test.bag(i);
        let truth = bag.target.as_ref().ok_or_else(|| {
            Error::Contract(format!("test bag {} has no recorded truth", bag.unit_id))
        })?;
        let coords = test.bag_coords(i);
        let features = test.bag_features(i);
        let (y, _) = predict(tree, &coords, &features, bag.patch_of.as_deref())?;
        let y = model_space_to_log1p(tree, &y)?;
        ids.push(bag.unit_id.clone());
        preds.extend_from_slice(&y);
        truths.extend_from_slice(truth);
    }
    Ok((
        ids,
        Tensor::new(vec![m, g], preds)?,
        Tensor::new(vec![m, g], truths)?,
    ))
}

/// Map model-space outputs back to log1p space (identity when the
/// model trains on log1p directly).
pub fn model_space_to_log1p(tree: &ParamTree, y: &[f64]) -> Result<Vec<f64>> {
    if !tree.arch.normalize {
        return Ok(y.to_vec());
    }
    let stats = tree
        .arch
        .norm_stats
        .as_ref()
        .ok_or_else(|| Error::Contract("normalizing model without stored stats".into()))?;
    let t = Tensor::new(vec![1, y.len()], y.to_vec())?;
    Ok(denormalize_values(&t, stats)?.into_data())
}
