//! Model assembly: parameter initialization, staging onto a tape, and
//! the end-to-end bag forward pass (graph attention, positional fusion,
//! transformer context, gene-query pooling, readout).
//!
//! Adapters attach transparently: when `lora.*` tensors are present in
//! a tree, staging swaps every targeted weight for base + (α/r)·up·down
//! with the base held constant on the tape.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{positional_embed, quantize, transformer_encode, Dropout, TrfLayerVars, ATTN_WINDOW};
use crate::error::{Error, Result};
use crate::graph::{build_bag_graph, gat_encode, GatLayerVars};
use crate::lora::{lora_meta, lora_targets};
use crate::mil::{pool, readout};
use crate::params::{ArchConfig, Extent, NormStats, ParamTree};
use crate::tape::{Tape, Var};
use crate::tensor::{randn, Tensor};

/// Architecture hyperparameters with published defaults.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub d_model: usize,
    pub gat_layers: usize,
    pub gat_heads: usize,
    pub leaky_slope: f64,
    pub knn_k: usize,
    pub trf_layers: usize,
    pub trf_heads: usize,
    pub d_ff: usize,
    pub n_pos: usize,
    pub d_readout: usize,
    pub use_softplus: bool,
    pub k_clusters: usize,
    pub normalize: bool,
}

impl ModelConfig {
    /// Defaults at full scale: D=128, 2 GAT layers × 4 heads, 2
    /// transformer layers × 4 heads, 1024 position bins, 8 clusters.
    pub fn with_width(d_model: usize) -> Self {
        ModelConfig {
            d_model,
            gat_layers: 2,
            gat_heads: 4,
            leaky_slope: 0.2,
            knn_k: 8,
            trf_layers: 2,
            trf_heads: 4,
            d_ff: 4 * d_model,
            n_pos: 1024,
            d_readout: d_model,
            use_softplus: true,
            k_clusters: 8,
            normalize: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.gat_heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by {} GAT heads",
                self.d_model, self.gat_heads
            )));
        }
        if self.d_model % self.trf_heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by {} attention heads",
                self.d_model, self.trf_heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::Config("width must be even for x/y embedding halves".into()));
        }
        Ok(())
    }

    pub fn to_arch(
        &self,
        genes: Vec<String>,
        extent: Extent,
        feature_dim: usize,
        pca_dim: usize,
        norm_stats: Option<NormStats>,
    ) -> ArchConfig {
        ArchConfig {
            d_model: self.d_model,
            feature_dim,
            pca_dim,
            genes,
            gat_layers: self.gat_layers,
            gat_heads: self.gat_heads,
            leaky_slope: self.leaky_slope,
            knn_k: self.knn_k,
            trf_layers: self.trf_layers,
            trf_heads: self.trf_heads,
            d_ff: self.d_ff,
            n_pos: self.n_pos,
            extent,
            d_readout: self.d_readout,
            use_softplus: self.use_softplus,
            k_clusters: self.k_clusters,
            normalize: self.normalize,
            norm_stats,
        }
    }
}

/// Fresh parameter tree with seeded Gaussian weights. Clustering
/// centroids and PCA tensors start frozen; training fills them in.
pub fn init_params(arch: ArchConfig, seed: u64) -> Result<ParamTree> {
    let d = arch.d_model;
    if d % arch.gat_heads != 0 || d % arch.trf_heads != 0 || d % 2 != 0 {
        return Err(Error::Config(format!("width {d} incompatible with head counts")));
    }
    let g = arch.n_genes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tree = ParamTree::new(arch);
    let arch = &tree.arch;

    let d_gat_head = d / arch.gat_heads;
    let mut inserts: Vec<(String, Tensor)> = Vec::new();
    for l in 0..arch.gat_layers {
        for h in 0..arch.gat_heads {
            inserts.push((
                format!("gat.{l}.head{h}.w"),
                randn(&[d, d_gat_head], 1.0 / (d as f64).sqrt(), &mut rng),
            ));
            inserts.push((
                format!("gat.{l}.head{h}.a"),
                randn(&[2 * d_gat_head, 1], 1.0 / (2.0 * d_gat_head as f64).sqrt(), &mut rng),
            ));
        }
        inserts.push((
            format!("gat.{l}.out_proj"),
            randn(&[d, d], 1.0 / (d as f64).sqrt(), &mut rng),
        ));
    }
    inserts.push(("pos.emb_x".into(), randn(&[arch.n_pos, d / 2], 0.02, &mut rng)));
    inserts.push(("pos.emb_y".into(), randn(&[arch.n_pos, d / 2], 0.02, &mut rng)));
    for l in 0..arch.trf_layers {
        for name in ["q", "k", "v", "o"] {
            inserts.push((
                format!("trf.{l}.{name}"),
                randn(&[d, d], 1.0 / (d as f64).sqrt(), &mut rng),
            ));
        }
        inserts.push((
            format!("trf.{l}.ffn_in"),
            randn(&[d, arch.d_ff], 1.0 / (d as f64).sqrt(), &mut rng),
        ));
        inserts.push((
            format!("trf.{l}.ffn_out"),
            randn(&[arch.d_ff, d], 1.0 / (arch.d_ff as f64).sqrt(), &mut rng),
        ));
    }
    inserts.push(("mil.q_gene".into(), randn(&[g, d], 1.0 / (d as f64).sqrt(), &mut rng)));
    inserts.push(("mil.w1".into(), randn(&[d, arch.d_readout], 1.0 / (d as f64).sqrt(), &mut rng)));
    inserts.push((
        "mil.w2".into(),
        randn(&[arch.d_readout, 1], 1.0 / (arch.d_readout as f64).sqrt(), &mut rng),
    ));
    inserts.push(("cluster.centroids".into(), Tensor::zeros(&[arch.k_clusters, d])));
    let pca = if arch.pca_dim > 0 {
        Some((arch.feature_dim, arch.pca_dim))
    } else {
        None
    };
    for (name, tensor) in inserts {
        tree.insert(&name, tensor);
    }
    if let Some((f, pd)) = pca {
        tree.insert("pca.mean", Tensor::zeros(&[1, f]));
        tree.insert("pca.components", Tensor::zeros(&[f, pd]));
        tree.set_trainable("pca.mean", false)?;
        tree.set_trainable("pca.components", false)?;
    }
    tree.set_trainable("cluster.centroids", false)?;
    Ok(tree)
}

/// The forward pass's view of the parameters on one tape.
pub struct ModelVars<'t> {
    pub gat: Vec<GatLayerVars<'t>>,
    pub emb_x: Var<'t>,
    pub emb_y: Var<'t>,
    pub trf: Vec<TrfLayerVars<'t>>,
    pub q_gene: Var<'t>,
    pub w1: Var<'t>,
    pub w2: Var<'t>,
}

/// Put parameters on the tape: trainable entries become leaves when
/// `train`, everything else constants. LoRA targets compose base +
/// scaled delta with adapter tensors as their own leaves.
pub fn stage_vars<'t>(tape: &'t Tape, tree: &ParamTree, train: bool) -> Result<ModelVars<'t>> {
    let meta = lora_meta(tree);
    let targets = if meta.is_some() {
        lora_targets(tree)
    } else {
        Vec::new()
    };
    let stage = |name: &str| -> Result<Var<'t>> {
        let entry = tree
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
        let base = if train && entry.trainable {
            tape.leaf(name, entry.tensor.clone())
        } else {
            tape.constant(entry.tensor.clone())
        };
        if let Some((rank, alpha)) = meta {
            if targets.iter().any(|t| t == name) {
                let up_name = format!("lora.{name}.up");
                let down_name = format!("lora.{name}.down");
                let up_entry = tree.get(&up_name).expect("target derived from names");
                let down_entry = tree.get(&down_name).ok_or_else(|| {
                    Error::Checkpoint(format!("adapter missing {down_name}"))
                })?;
                let up = if train && up_entry.trainable {
                    tape.leaf(&up_name, up_entry.tensor.clone())
                } else {
                    tape.constant(up_entry.tensor.clone())
                };
                let down = if train && down_entry.trainable {
                    tape.leaf(&down_name, down_entry.tensor.clone())
                } else {
                    tape.constant(down_entry.tensor.clone())
                };
                let delta = up.matmul(down)?.scale(alpha / rank as f64);
                return base.add(delta);
            }
        }
        Ok(base)
    };

    let arch = &tree.arch;
    let mut gat = Vec::with_capacity(arch.gat_layers);
    for l in 0..arch.gat_layers {
        let mut heads = Vec::with_capacity(arch.gat_heads);
        for h in 0..arch.gat_heads {
            heads.push((
                stage(&format!("gat.{l}.head{h}.w"))?,
                stage(&format!("gat.{l}.head{h}.a"))?,
            ));
        }
        gat.push(GatLayerVars {
            heads,
            out_proj: stage(&format!("gat.{l}.out_proj"))?,
        });
    }
    let mut trf = Vec::with_capacity(arch.trf_layers);
    for l in 0..arch.trf_layers {
        trf.push(TrfLayerVars {
            q: stage(&format!("trf.{l}.q"))?,
            k: stage(&format!("trf.{l}.k"))?,
            v: stage(&format!("trf.{l}.v"))?,
            o: stage(&format!("trf.{l}.o"))?,
            ffn_in: stage(&format!("trf.{l}.ffn_in"))?,
            ffn_out: stage(&format!("trf.{l}.ffn_out"))?,
        });
    }
    Ok(ModelVars {
        gat,
        emb_x: stage("pos.emb_x")?,
        emb_y: stage("pos.emb_y")?,
        trf,
        q_gene: stage("mil.q_gene")?,
        w1: stage("mil.w1")?,
        w2: stage("mil.w2")?,
    })
}

/// Differentiable outputs of one bag.
pub struct Forward<'t> {
    /// G×1 predicted expression in model space.
    pub y: Var<'t>,
    /// G×N row-stochastic attention over cells.
    pub attention: Var<'t>,
    /// N×D contextual cell embeddings.
    pub h_cell: Var<'t>,
}

/// Full pipeline for one bag of cells with compressed features (N×D).
pub fn forward_bag<'t>(
    vars: &ModelVars<'t>,
    arch: &ArchConfig,
    coords: &[(f64, f64)],
    features: Var<'t>,
    patch_of: Option<&[usize]>,
    drop: Option<&mut Dropout>,
) -> Result<Forward<'t>> {
    let shape = features.shape();
    if shape.len() != 2 || shape[1] != arch.d_model {
        return Err(Error::Dimension(format!(
            "bag features {:?}, model width {}",
            shape, arch.d_model
        )));
    }
    if coords.len() != shape[0] {
        return Err(Error::Dimension(format!(
            "{} coordinates for {} cells",
            coords.len(),
            shape[0]
        )));
    }
    let graph = build_bag_graph(coords, patch_of, arch.knn_k)?;
    let h_gat = gat_encode(features, &graph, &vars.gat, arch.leaky_slope)?;
    let (bins_x, bins_y, _) = quantize(coords, &arch.extent, arch.n_pos);
    let s = positional_embed(vars.emb_x, vars.emb_y, &bins_x, &bins_y)?;
    let h_cell = transformer_encode(h_gat, s, &vars.trf, arch.trf_heads, ATTN_WINDOW, drop)?;
    let (attention, z) = pool(h_cell, vars.q_gene)?;
    let y = readout(z, vars.w1, vars.w2, arch.use_softplus)?;
    Ok(Forward {
        y,
        attention,
        h_cell,
    })
}

/// Compress raw features with the stored PCA basis; identity when the
/// tree has no PCA (pca_dim = 0).
pub fn compress_features(tree: &ParamTree, raw: &Tensor) -> Result<Tensor> {
    if tree.arch.pca_dim == 0 {
        return Ok(raw.clone());
    }
    let mean = tree.tensor("pca.mean")?;
    let comps = tree.tensor("pca.components")?;
    let (n, f) = raw.dims2()?;
    if f != mean.len() {
        return Err(Error::Dimension(format!(
            "raw width {f} vs PCA mean width {}",
            mean.len()
        )));
    }
    let mut centered = raw.clone();
    for i in 0..n {
        for j in 0..f {
            centered.data_mut()[i * f + j] -= mean.data()[j];
        }
    }
    centered.matmul(comps)
}

/// Inference on one bag from raw features. Returns predicted expression
/// (model space, length G) and the G×N attention map.
pub fn predict(
    tree: &ParamTree,
    coords: &[(f64, f64)],
    raw_features: &Tensor,
    patch_of: Option<&[usize]>,
) -> Result<(Vec<f64>, Tensor)> {
    let compressed = compress_features(tree, raw_features)?;
    let tape = Tape::new();
    let vars = stage_vars(&tape, tree, false)?;
    let feats = tape.constant(compressed);
    let fwd = forward_bag(&vars, &tree.arch, coords, feats, patch_of, None)?;
    Ok((fwd.y.value().into_data(), fwd.attention.value()))
}
