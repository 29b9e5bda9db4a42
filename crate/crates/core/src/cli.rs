//! Command-line surface: reproducible subcommands over the pipeline.
//!
//! Every command writes its numeric artifacts deterministically for a
//! fixed command line and seed, plus a `run_record.json` carrying the
//! invocation, config hash, and timings (the one file allowed to vary
//! between reruns).

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{
    evaluate, run_protocol, spatial_strip_edges, write_eval_report, write_summary, EvalReport,
    FoldSummary, Protocol, ProtocolReport, EVAL_SPACE,
};
use crate::ingest::bags::BagSet;
use crate::ingest::hvg::{cap_by_dispersion, final_gene_set, select_hvgs, HvgConfig};
use crate::ingest::manifest::{load_manifest, load_samples, write_gene_list, TaskKind};
use crate::ingest::normalize::log1p_frame;
use crate::ingest::tsv::write_atomic;
use crate::mil::deconvolve_values;
use crate::model::{predict, ModelConfig};
use crate::params::ParamTree;
use crate::pipeline::{
    assign_phenotypes_from_tree, build_model, load_dataset, load_dataset_with_panel,
    model_space_to_log1p, predict_fold, raw_bagset, stage_training, Dataset, PipelineConfig,
};
use crate::stain::{
    fit_reference, load_png, normalize_to_reference, read_basis, save_png, write_basis,
    DEFAULT_LAMBDA_SPARSE, DEFAULT_SNMF_ITERS,
};
use crate::synth::{generate, paired_tasks, PlantedWorld, SynthSpec};
use crate::train::{fit, prepare_transfer, EpochStats, TrainConfig};

#[derive(Parser)]
#[command(
    name = "bitro",
    version,
    about = "Bulk and spot gene expression prediction from cell-level slide features"
)]
pub struct Cli {
    /// Base directory all relative paths resolve against.
    #[arg(long, global = true)]
    pub workdir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with planted ground truth.
    Synth(SynthArgs),
    /// Fit a stain reference or normalize tiles against one.
    PrepStain(PrepStainArgs),
    /// Select a variable-gene panel from a manifest.
    PrepGenes(PrepGenesArgs),
    /// Train a model from scratch.
    Train(TrainArgs),
    /// Fine-tune a checkpoint on a new dataset, optionally via LoRA.
    Finetune(FinetuneArgs),
    /// Score a model or run a cross-validation protocol.
    Eval(EvalArgs),
    /// Redistribute unit predictions to member cells via attention.
    Deconvolve(DeconvolveArgs),
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
pub enum TaskArg {
    Spot,
    Bulk,
}

impl From<TaskArg> for TaskKind {
    fn from(t: TaskArg) -> TaskKind {
        match t {
            TaskArg::Spot => TaskKind::Spot,
            TaskArg::Bulk => TaskKind::Bulk,
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
pub enum ProtocolArg {
    /// Score every unit with the fixed model (needs --model).
    All,
    /// Leave-one-sample-out folds.
    Loo,
    /// A single seeded 80/20 sample split.
    #[value(name = "split_4_1")]
    Split41,
    /// Five contiguous x-axis strips of one slide.
    #[value(name = "spatial_5fold")]
    Spatial5fold,
}

#[derive(Args, Clone)]
pub struct ModelFlags {
    /// Model width D (must equal --pca when PCA is on, else the raw
    /// feature width).
    #[arg(long, default_value_t = 128)]
    pub width: usize,
    #[arg(long, default_value_t = 2)]
    pub gat_layers: usize,
    #[arg(long, default_value_t = 4)]
    pub gat_heads: usize,
    #[arg(long, default_value_t = 2)]
    pub trf_layers: usize,
    #[arg(long, default_value_t = 4)]
    pub trf_heads: usize,
    /// Feed-forward width; 0 means 4x width.
    #[arg(long, default_value_t = 0)]
    pub d_ff: usize,
    /// Position bins per axis for the spatial embedding.
    #[arg(long, default_value_t = 1024)]
    pub pos_bins: usize,
    /// Neighbors per cell in the spatial graph.
    #[arg(long, default_value_t = 8)]
    pub knn: usize,
    /// Phenotype clusters for the regularizer.
    #[arg(long, default_value_t = 8)]
    pub clusters: usize,
    #[arg(long, default_value_t = 0.2)]
    pub leaky_slope: f64,
    /// Readout hidden width; 0 means width.
    #[arg(long, default_value_t = 0)]
    pub readout: usize,
    /// PCA compression width; 0 keeps raw features.
    #[arg(long, default_value_t = 0)]
    pub pca: usize,
    /// Train on log1p targets without z-score normalization.
    #[arg(long)]
    pub no_normalize: bool,
    /// Drop the softplus output activation.
    #[arg(long)]
    pub no_softplus: bool,
}

impl ModelFlags {
    fn to_model_config(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.width,
            gat_layers: self.gat_layers,
            gat_heads: self.gat_heads,
            leaky_slope: self.leaky_slope,
            knn_k: self.knn,
            trf_layers: self.trf_layers,
            trf_heads: self.trf_heads,
            d_ff: if self.d_ff == 0 { 4 * self.width } else { self.d_ff },
            n_pos: self.pos_bins,
            d_readout: if self.readout == 0 { self.width } else { self.readout },
            use_softplus: !self.no_softplus,
            k_clusters: self.clusters,
            normalize: !self.no_normalize,
        }
    }
}

#[derive(Args, Clone)]
pub struct TrainFlags {
    /// Learning rate (grid: 1e-3, 5e-4, 1e-4, 1e-5).
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Epoch cap (at most 100).
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    /// Early-stopping patience in epochs.
    #[arg(long, default_value_t = 6)]
    pub patience: usize,
    /// Gradient clipping norm.
    #[arg(long, default_value_t = 1.0)]
    pub clip: f64,
    /// Cluster regularizer weight; 0 disables it exactly.
    #[arg(long, default_value_t = 0.3)]
    pub lambda: f64,
    /// Dropout rate (grid: 0, 0.1, 0.2).
    #[arg(long, default_value_t = 0.0)]
    pub dropout: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fraction of training bags held out for early stopping.
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
}

impl TrainFlags {
    fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            patience: self.patience,
            clip: self.clip,
            lambda: self.lambda,
            dropout: self.dropout,
            seed: self.seed,
            batch_size: self.batch,
        }
    }
}

#[derive(Args, Clone)]
pub struct DataFlags {
    /// Final panel size when the manifest pins no gene list.
    #[arg(long, default_value_t = 64)]
    pub hvg_k: usize,
    /// Dispersion cap on the panel; 0 disables.
    #[arg(long, default_value_t = 0)]
    pub hvg_cap: usize,
    /// Cell subsample cap per bulk sample.
    #[arg(long, default_value_t = 4096)]
    pub max_bulk_cells: usize,
}

fn pipeline_cfg(model: &ModelFlags, train: &TrainFlags, data: &DataFlags) -> PipelineConfig {
    PipelineConfig {
        model: model.to_model_config(),
        train: train.to_train_config(),
        pca_dim: model.pca,
        hvg_k: data.hvg_k,
        hvg_cap: data.hvg_cap,
        max_bulk_cells: data.max_bulk_cells,
        val_fraction: train.val_fraction,
    }
}

#[derive(Args)]
pub struct SynthArgs {
    /// Output directory for the dataset.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 6)]
    pub samples: usize,
    #[arg(long, default_value_t = 64)]
    pub spots: usize,
    #[arg(long, default_value_t = 24)]
    pub cells: usize,
    #[arg(long, default_value_t = 16)]
    pub features: usize,
    #[arg(long, default_value_t = 32)]
    pub genes: usize,
    #[arg(long, default_value_t = 4)]
    pub types: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, value_enum, default_value_t = TaskArg::Spot)]
    pub task: TaskArg,
    /// Emit paired st/ and bulk/ datasets sharing one planted world.
    #[arg(long)]
    pub paired: bool,
    /// Sample count for the bulk half of a --paired run.
    #[arg(long, default_value_t = 0)]
    pub bulk_samples: usize,
}

#[derive(Args)]
pub struct PrepStainArgs {
    /// Fit a reference basis from this tile instead of normalizing.
    #[arg(long)]
    pub fit_ref: Option<PathBuf>,
    /// Reference basis.tsv to normalize against.
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    /// Directory of .png tiles to normalize.
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Output path: basis.tsv for --fit-ref, a directory otherwise.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_LAMBDA_SPARSE)]
    pub lambda: f64,
    #[arg(long, default_value_t = DEFAULT_SNMF_ITERS)]
    pub iters: usize,
}

#[derive(Args)]
pub struct PrepGenesArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output gene list path.
    #[arg(long)]
    pub out: PathBuf,
    /// Final panel size (mean/SD intersection cut).
    #[arg(long, default_value_t = 64)]
    pub k: usize,
    /// Dispersion cap on the final panel; 0 disables.
    #[arg(long, default_value_t = 0)]
    pub cap: usize,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    #[arg(long, default_value_t = 2000)]
    pub per_sample_top: usize,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Checkpoint directory to create.
    #[arg(long)]
    pub out: PathBuf,
    /// Assert the manifest's task kind.
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub data: DataFlags,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
pub enum DirectionArg {
    St2bulk,
    Bulk2st,
}

#[derive(Args)]
pub struct FinetuneArgs {
    /// Base checkpoint to adapt.
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Transfer direction, recorded in the run record.
    #[arg(long, value_enum)]
    pub direction: Option<DirectionArg>,
    /// LoRA rank; 0 runs a full fine-tune instead.
    #[arg(long, default_value_t = 8)]
    pub lora_rank: usize,
    #[arg(long, default_value_t = 16.0)]
    pub lora_alpha: f64,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub data: DataFlags,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Fixed checkpoint to score; omit to cross-validate from scratch.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ProtocolArg::All)]
    pub protocol: ProtocolArg,
    #[command(flatten)]
    pub model_flags: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub data: DataFlags,
}

#[derive(Args)]
pub struct DeconvolveArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub data: DataFlags,
}

// ── run record ──

#[derive(Serialize)]
struct RunRecord {
    command: Vec<String>,
    config_hash: String,
    seed: u64,
    version: String,
    duration_s: f64,
    outputs: Vec<String>,
}

struct CmdOut {
    record_dir: PathBuf,
    outputs: Vec<PathBuf>,
    seed: u64,
}

fn write_run_record(out: &CmdOut, started: Instant) -> Result<()> {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let mut hasher = Sha256::new();
    for a in &argv {
        hasher.update(a.as_bytes());
        hasher.update([0]);
    }
    let record = RunRecord {
        command: argv,
        config_hash: format!("{:x}", hasher.finalize()),
        seed: out.seed,
        version: format!("v{}", env!("CARGO_PKG_VERSION")),
        duration_s: started.elapsed().as_secs_f64(),
        outputs: out.outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    let body = serde_json::to_string_pretty(&record)
        .map_err(|e| Error::Parse(format!("run record serialization: {e}")))?;
    write_atomic(&out.record_dir.join("run_record.json"), body.as_bytes())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_history(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut out = String::from("epoch\ttrain_loss\tval_loss\n");
    for e in history {
        out.push_str(&format!("{}\t{}\t{}\n", e.epoch, e.train_loss, e.val_loss));
    }
    write_atomic(path, out.as_bytes())
}

// ── commands ──

fn cmd_synth(a: SynthArgs) -> Result<CmdOut> {
    let world = PlantedWorld::new(a.seed, a.features, a.genes, a.types, a.noise)?;
    let spec = SynthSpec {
        n_samples: a.samples,
        spots_per_sample: a.spots,
        cells_per_spot: a.cells,
    };
    let mut outputs = Vec::new();
    if a.paired {
        let bulk_spec = SynthSpec {
            n_samples: if a.bulk_samples == 0 { a.samples } else { a.bulk_samples },
            ..spec
        };
        let st_dir = a.out.join("st");
        let bulk_dir = a.out.join("bulk");
        paired_tasks(&world, &spec, &bulk_spec, &st_dir, &bulk_dir)?;
        outputs.push(st_dir.join("manifest.json"));
        outputs.push(bulk_dir.join("manifest.json"));
    } else {
        generate(&world, &spec, a.task.into(), "s", &a.out)?;
        outputs.push(a.out.join("manifest.json"));
    }
    Ok(CmdOut {
        record_dir: a.out,
        outputs,
        seed: a.seed,
    })
}

fn cmd_prep_stain(a: PrepStainArgs) -> Result<CmdOut> {
    match (&a.fit_ref, &a.reference, &a.input) {
        (Some(tile), None, None) => {
            let (pixels, h, w) = load_png(tile)?;
            let reference = fit_reference(&pixels, h, w, a.lambda, a.iters)?;
            if let Some(parent) = a.out.parent() {
                if !parent.as_os_str().is_empty() {
                    ensure_dir(parent)?;
                }
            }
            write_basis(&a.out, &reference)?;
            let record_dir = a
                .out
                .parent()
                .filter(|p| !p.as_os_str().is_empty())
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from("."));
            Ok(CmdOut {
                outputs: vec![a.out.clone()],
                record_dir,
                seed: 0,
            })
        }
        (None, Some(basis), Some(dir)) => {
            let reference = read_basis(basis)?;
            let mut tiles: Vec<PathBuf> = std::fs::read_dir(dir)
                .map_err(|e| Error::io(dir, e))?
                .filter_map(|r| r.ok().map(|e| e.path()))
                .filter(|p| {
                    p.extension()
                        .map(|e| e.eq_ignore_ascii_case("png"))
                        .unwrap_or(false)
                })
                .collect();
            tiles.sort();
            if tiles.is_empty() {
                return Err(Error::Config(format!("no .png tiles in {}", dir.display())));
            }
            ensure_dir(&a.out)?;
            let outputs: Vec<PathBuf> = tiles
                .par_iter()
                .map(|tile| -> Result<PathBuf> {
                    let (pixels, h, w) = load_png(tile)?;
                    let normalized =
                        normalize_to_reference(&pixels, h, w, &reference, a.lambda, a.iters)?;
                    let dest = a.out.join(tile.file_name().expect("tile has a file name"));
                    save_png(&dest, &normalized, h, w)?;
                    Ok(dest)
                })
                .collect::<Result<_>>()?;
            Ok(CmdOut {
                record_dir: a.out,
                outputs,
                seed: 0,
            })
        }
        _ => Err(Error::Config(
            "use either --fit-ref <tile.png> --out <basis.tsv>, or --ref <basis.tsv> --in <dir> --out <dir>".into(),
        )),
    }
}

fn cmd_prep_genes(a: PrepGenesArgs) -> Result<CmdOut> {
    let desc = load_manifest(&a.manifest)?;
    let samples = load_samples(&desc)?;
    let logged: Vec<_> = samples
        .iter()
        .map(|(_, e)| log1p_frame(e))
        .collect::<Result<_>>()?;
    let hvg_cfg = HvgConfig {
        n_bins: a.bins,
        per_sample_top: a.per_sample_top,
        ..HvgConfig::default()
    };
    let candidates = select_hvgs(&logged, &hvg_cfg)?;
    let mut panel = final_gene_set(&candidates, &logged, a.k)?;
    if a.cap > 0 && panel.len() > a.cap {
        panel = cap_by_dispersion(&panel, &logged, a.bins, a.cap)?;
    }
    if let Some(parent) = a.out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    write_gene_list(&a.out, &panel)?;
    let record_dir = a
        .out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    Ok(CmdOut {
        outputs: vec![a.out.clone()],
        record_dir,
        seed: 0,
    })
}

fn cmd_train(a: TrainArgs) -> Result<CmdOut> {
    let cfg = pipeline_cfg(&a.model, &a.train, &a.data);
    cfg.train.validate()?;
    let ds = load_dataset(&a.manifest, &cfg)?;
    if let Some(task) = a.task {
        if TaskKind::from(task) != ds.task {
            return Err(Error::Config(format!(
                "manifest task is {} but --task asked for {}",
                ds.task.tag(),
                TaskKind::from(task).tag()
            )));
        }
    }
    let samples: Vec<usize> = (0..ds.samples.len()).collect();
    let mut staged = stage_training(&ds, &samples, cfg.model.normalize, &cfg)?;
    let mut tree = build_model(ds.genes.clone(), &mut staged, &cfg)?;
    let history = fit(&mut tree, &staged.train, &staged.val, &cfg.train)?;
    ensure_dir(&a.out)?;
    let model_path = a.out.join("model.bitro");
    tree.save(&model_path)?;
    let hist_path = a.out.join("history.tsv");
    write_history(&hist_path, &history)?;
    Ok(CmdOut {
        record_dir: a.out,
        outputs: vec![model_path, hist_path],
        seed: cfg.train.seed,
    })
}

fn cmd_finetune(a: FinetuneArgs) -> Result<CmdOut> {
    let base = ParamTree::load(&a.base)?;
    let cfg = PipelineConfig {
        model: ModelConfig::with_width(base.arch.d_model),
        train: a.train.to_train_config(),
        pca_dim: base.arch.pca_dim,
        hvg_k: a.data.hvg_k,
        hvg_cap: a.data.hvg_cap,
        max_bulk_cells: a.data.max_bulk_cells,
        val_fraction: a.train.val_fraction,
    };
    cfg.train.validate()?;
    let ds = load_dataset(&a.manifest, &cfg)?;
    let rank = if a.lora_rank == 0 { None } else { Some(a.lora_rank) };
    let mut tree = prepare_transfer(&base, &ds.genes, rank, a.lora_alpha, cfg.train.seed)?;
    let samples: Vec<usize> = (0..ds.samples.len()).collect();
    let mut staged = stage_training(&ds, &samples, tree.arch.normalize, &cfg)?;
    if staged.raw_width != tree.arch.feature_dim {
        return Err(Error::Config(format!(
            "checkpoint expects {}-wide cell features, dataset has {}",
            tree.arch.feature_dim, staged.raw_width
        )));
    }
    // The base extent and PCA stay; target stats are refit.
    if tree.arch.normalize {
        tree.arch.norm_stats = Some(staged.stats.clone());
    }
    staged.train.compress(&tree)?;
    staged.val.compress(&tree)?;
    assign_phenotypes_from_tree(&tree, &mut [&mut staged.train, &mut staged.val])?;
    let history = fit(&mut tree, &staged.train, &staged.val, &cfg.train)?;
    ensure_dir(&a.out)?;
    let mut outputs = Vec::new();
    let hist_path = a.out.join("history.tsv");
    write_history(&hist_path, &history)?;
    if rank.is_some() {
        let adapter_path = a.out.join("adapter.bitro");
        tree.save(&adapter_path)?;
        let merged_path = a.out.join("merged.bitro");
        crate::lora::merge_lora(&tree)?.save(&merged_path)?;
        outputs.push(adapter_path);
        outputs.push(merged_path);
    } else {
        let model_path = a.out.join("model.bitro");
        tree.save(&model_path)?;
        outputs.push(model_path);
    }
    outputs.push(hist_path);
    Ok(CmdOut {
        record_dir: a.out,
        outputs,
        seed: cfg.train.seed,
    })
}

/// Fold groupings for scoring a fixed model: each fold is a labeled
/// bag set in evaluation form.
fn fixed_folds(
    ds: &Dataset,
    protocol: ProtocolArg,
    seed: u64,
    cfg: &PipelineConfig,
) -> Result<Vec<(String, BagSet)>> {
    let s = ds.samples.len();
    match protocol {
        ProtocolArg::All => {
            let all: Vec<usize> = (0..s).collect();
            Ok(vec![("all".into(), raw_bagset(ds, &all, cfg)?)])
        }
        ProtocolArg::Loo => (0..s)
            .map(|i| {
                Ok((
                    ds.samples[i].table.sample_id.clone(),
                    raw_bagset(ds, &[i], cfg)?,
                ))
            })
            .collect(),
        ProtocolArg::Split41 => {
            if s < 2 {
                return Err(Error::Protocol(format!(
                    "a 4:1 split needs at least 2 samples, got {s}"
                )));
            }
            let mut order: Vec<usize> = (0..s).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let n_test = ((s as f64 / 5.0).round() as usize).clamp(1, s - 1);
            let test: Vec<usize> = order[..n_test].to_vec();
            Ok(vec![("test".into(), raw_bagset(ds, &test, cfg)?)])
        }
        ProtocolArg::Spatial5fold => {
            if s != 1 {
                return Err(Error::Protocol(format!(
                    "spatial five-fold runs on a single slide, got {s} samples"
                )));
            }
            let xs: Vec<f64> = ds.samples[0].table.coords.iter().map(|&(x, _)| x).collect();
            let edges = spatial_strip_edges(&xs);
            let all = raw_bagset(ds, &[0], cfg)?;
            let mut strips: Vec<(String, BagSet)> = (0..5)
                .map(|f| (format!("strip{f}"), BagSet::new(all.tables.clone())))
                .collect();
            for (slot, bag) in &all.bags {
                let (x, _) = bag.unit_xy.ok_or_else(|| {
                    Error::Protocol("spatial folds need spot coordinates".into())
                })?;
                let f = (0..5)
                    .find(|&f| x >= edges[f] && x < edges[f + 1])
                    .expect("edges cover the line");
                strips[f].1.push_bag(*slot, bag.clone())?;
            }
            Ok(strips)
        }
    }
}

fn score_fixed_model(
    tree: &ParamTree,
    ds: &Dataset,
    protocol: ProtocolArg,
    seed: u64,
    cfg: &PipelineConfig,
) -> Result<ProtocolReport> {
    let folds = fixed_folds(ds, protocol, seed, cfg)?;
    let tag = match protocol {
        ProtocolArg::All => "all",
        ProtocolArg::Loo => "loo",
        ProtocolArg::Split41 => "split_4_1",
        ProtocolArg::Spatial5fold => "spatial_5fold",
    };
    let g = ds.genes.len();
    let mut summaries = Vec::new();
    let mut ids = Vec::new();
    let mut preds = Vec::new();
    let mut truths = Vec::new();
    for (f, (_name, set)) in folds.iter().enumerate() {
        if set.n_bags() == 0 {
            return Err(Error::Protocol(format!("fold {f} has no units to score")));
        }
        let (fold_ids, p, t) = predict_fold(tree, set)?;
        let report = evaluate(&t, &p, &fold_ids, &ds.genes, EVAL_SPACE)?;
        summaries.push(FoldSummary {
            fold: f,
            test_units: fold_ids.len(),
            epochs_trained: 0,
            best_val_loss: f64::NAN,
            pcc_overall_mean: report.pcc_overall_mean,
            pcc_gene_mean: report.pcc_gene_mean,
            js_mean: report.js_mean,
        });
        ids.extend(fold_ids);
        preds.extend(p.into_data());
        truths.extend(t.into_data());
    }
    let m = ids.len();
    let aggregate: EvalReport = evaluate(
        &crate::tensor::Tensor::new(vec![m, g], truths)?,
        &crate::tensor::Tensor::new(vec![m, g], preds)?,
        &ids,
        &ds.genes,
        EVAL_SPACE,
    )?;
    Ok(ProtocolReport {
        protocol: tag.to_string(),
        folds: summaries,
        aggregate,
    })
}

fn cmd_eval(a: EvalArgs) -> Result<CmdOut> {
    let cfg = pipeline_cfg(&a.model_flags, &a.train, &a.data);
    let report = match &a.model {
        Some(path) => {
            let tree = ParamTree::load(path)?;
            let ds = load_dataset_with_panel(&a.manifest, &tree.arch.genes)?;
            score_fixed_model(&tree, &ds, a.protocol, cfg.train.seed, &cfg)?
        }
        None => {
            let protocol = match a.protocol {
                ProtocolArg::All => {
                    return Err(Error::Config(
                        "--protocol all scores a fixed model; pass --model, or pick loo, split_4_1, or spatial_5fold".into(),
                    ))
                }
                ProtocolArg::Loo => Protocol::LeaveOneOut,
                ProtocolArg::Split41 => Protocol::Split41 { seed: cfg.train.seed },
                ProtocolArg::Spatial5fold => Protocol::Spatial5Fold,
            };
            cfg.train.validate()?;
            let ds = load_dataset(&a.manifest, &cfg)?;
            run_protocol(&ds, protocol, &cfg)?
        }
    };
    ensure_dir(&a.out)?;
    let report_path = a.out.join("eval_report.tsv");
    write_eval_report(&report_path, &report.aggregate)?;
    let summary_path = a.out.join("summary.json");
    write_summary(&summary_path, &report)?;
    Ok(CmdOut {
        record_dir: a.out,
        outputs: vec![report_path, summary_path],
        seed: cfg.train.seed,
    })
}

fn cmd_deconvolve(a: DeconvolveArgs) -> Result<CmdOut> {
    let tree = ParamTree::load(&a.model)?;
    let cfg = PipelineConfig {
        max_bulk_cells: a.data.max_bulk_cells,
        ..PipelineConfig::default()
    };
    let ds = load_dataset_with_panel(&a.manifest, &tree.arch.genes)?;
    let mut out = String::from("sample_id\tunit_id\tcell_id");
    for gene in &ds.genes {
        out.push_str(&format!("\tg_{gene}"));
    }
    out.push('\n');
    for (si, sample) in ds.samples.iter().enumerate() {
        let set = raw_bagset(&ds, &[si], &cfg)?;
        for i in 0..set.n_bags() {
            let bag = set.bag(i);
            let coords = set.bag_coords(i);
            let features = set.bag_features(i);
            let (y, attention) = predict(&tree, &coords, &features, bag.patch_of.as_deref())?;
            let y_log = model_space_to_log1p(&tree, &y)?;
            let cells = deconvolve_values(&attention, &y_log)?;
            let g = ds.genes.len();
            for (row, &member) in bag.members.iter().enumerate() {
                out.push_str(&format!(
                    "{}\t{}\t{}",
                    sample.table.sample_id, bag.unit_id, sample.table.cell_ids[member]
                ));
                for j in 0..g {
                    out.push_str(&format!("\t{}", cells.data()[row * g + j]));
                }
                out.push('\n');
            }
        }
    }
    ensure_dir(&a.out)?;
    let path = a.out.join("deconvolved_cells.tsv");
    write_atomic(&path, out.as_bytes())?;
    Ok(CmdOut {
        record_dir: a.out,
        outputs: vec![path],
        seed: 0,
    })
}

// ── entry ──

fn dispatch(command: Command) -> Result<CmdOut> {
    match command {
        Command::Synth(a) => cmd_synth(a),
        Command::PrepStain(a) => cmd_prep_stain(a),
        Command::PrepGenes(a) => cmd_prep_genes(a),
        Command::Train(a) => cmd_train(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Deconvolve(a) => cmd_deconvolve(a),
    }
}

/// Binary entry point: parses flags, honors BITRO_THREADS and
/// --workdir, runs the command, and reports errors as a single line
/// on stderr with a nonzero exit.
pub fn run() {
    if let Ok(v) = std::env::var("BITRO_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
    let cli = Cli::parse();
    if let Some(dir) = &cli.workdir {
        if let Err(e) = std::env::set_current_dir(dir) {
            eprintln!("error: io error: {}: {e}", dir.display());
            std::process::exit(1);
        }
    }
    let started = Instant::now();
    let result = dispatch(cli.command).and_then(|out| write_run_record(&out, started));
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_declares_all_subcommands() {
        use clap::CommandFactory;
        let cmd = Cli::command();
        let names: Vec<&str> = cmd.get_subcommands().map(|c| c.get_name()).collect();
        for want in [
            "synth",
            "prep-stain",
            "prep-genes",
            "train",
            "finetune",
            "eval",
            "deconvolve",
        ] {
            assert!(names.contains(&want), "missing subcommand {want}");
        }
        cmd.debug_assert();
    }

    #[test]
    fn flag_defaults_map_onto_configs() {
        let cli = Cli::try_parse_from([
            "bitro", "train", "--manifest", "m.json", "--out", "ckpt",
        ])
        .unwrap();
        let Command::Train(args) = cli.command else {
            panic!("expected train");
        };
        let train = args.train.to_train_config();
        assert_eq!(train.lr, 1e-4);
        assert_eq!(train.epochs, 100);
        assert_eq!(train.patience, 6);
        assert_eq!(train.clip, 1.0);
        assert_eq!(train.lambda, 0.3);
        assert_eq!(train.dropout, 0.0);
        assert_eq!(train.batch_size, 32);
        assert!(train.validate().is_ok());
        let model = args.model.to_model_config();
        assert_eq!(model.d_model, 128);
        assert_eq!(model.d_ff, 512);
        assert!(model.normalize);
        assert!(model.use_softplus);
    }

    #[test]
    fn ablation_flags_flip_the_config() {
        let cli = Cli::try_parse_from([
            "bitro",
            "train",
            "--manifest",
            "m.json",
            "--out",
            "ckpt",
            "--lambda",
            "0",
            "--no-normalize",
            "--no-softplus",
        ])
        .unwrap();
        let Command::Train(args) = cli.command else {
            panic!("expected train");
        };
        assert_eq!(args.train.to_train_config().lambda, 0.0);
        let model = args.model.to_model_config();
        assert!(!model.normalize);
        assert!(!model.use_softplus);
    }

    #[test]
    fn protocol_names_parse() {
        for (raw, want) in [
            ("loo", ProtocolArg::Loo),
            ("split_4_1", ProtocolArg::Split41),
            ("spatial_5fold", ProtocolArg::Spatial5fold),
            ("all", ProtocolArg::All),
        ] {
            let cli = Cli::try_parse_from([
                "bitro", "eval", "--manifest", "m.json", "--out", "o", "--protocol", raw,
            ])
            .unwrap();
            let Command::Eval(args) = cli.command else {
                panic!("expected eval");
            };
            assert!(args.protocol == want, "{raw}");
        }
    }
}
