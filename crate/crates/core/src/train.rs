//! Training: the composite regression + cluster-spread objective, the
//! epoch loop with patience-based early stopping, and gene-set
//! re-heading for transfer between bulk and spot tasks.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adam::AdamState;
use crate::cluster::{cluster_loss, kmeans_fit};
use crate::encoder::Dropout;
use crate::error::{Error, Result};
use crate::ingest::bags::BagSet;
use crate::lora;
use crate::mil::deconvolve;
use crate::model::{forward_bag, stage_vars};
use crate::params::ParamTree;
use crate::tape::{Tape, Var};
use crate::tensor::{randn, Tensor};

pub const LR_GRID: [f64; 4] = [1e-3, 5e-4, 1e-4, 1e-5];
pub const DROPOUT_GRID: [f64; 3] = [0.0, 0.1, 0.2];
pub const MAX_EPOCHS: usize = 100;
pub const DEFAULT_PATIENCE: usize = 6;
pub const DEFAULT_CLIP: f64 = 1.0;
pub const DEFAULT_LAMBDA: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub patience: usize,
    pub clip: f64,
    pub lambda: f64,
    pub dropout: f64,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            epochs: MAX_EPOCHS,
            patience: DEFAULT_PATIENCE,
            clip: DEFAULT_CLIP,
            lambda: DEFAULT_LAMBDA,
            dropout: 0.0,
            seed: 0,
            batch_size: 32,
        }
    }
}

impl TrainConfig {
    /// Keep every knob on its searched grid: lr in {1e-3, 5e-4, 1e-4,
    /// 1e-5}, lambda 0 (regularizer off) or in [0.1, 0.5], dropout in
    /// {0, 0.1, 0.2}, at most 100 epochs.
    pub fn validate(&self) -> Result<()> {
        if !LR_GRID.contains(&self.lr) {
            return Err(Error::Config(format!(
                "learning rate {} not in {LR_GRID:?}",
                self.lr
            )));
        }
        if self.epochs > MAX_EPOCHS {
            return Err(Error::Config(format!(
                "epochs {} above the {MAX_EPOCHS} cap",
                self.epochs
            )));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if !(self.clip > 0.0) {
            return Err(Error::Config(format!("clip norm {} must be positive", self.clip)));
        }
        if self.lambda != 0.0 && !(0.1..=0.5).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "lambda {} must be 0 or within [0.1, 0.5]",
                self.lambda
            )));
        }
        if !DROPOUT_GRID.contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} not in {DROPOUT_GRID:?}",
                self.dropout
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Mean squared bag error plus the optional cluster-spread penalty.
/// With lambda = 0 the result is exactly the MSE term: the penalty
/// never touches the graph.
pub fn total_loss<'t>(
    pred: Var<'t>,
    target: &Tensor,
    cells: Option<(Var<'t>, &[usize])>,
    lambda: f64,
) -> Result<Var<'t>> {
    if lambda < 0.0 {
        return Err(Error::Contract(format!("lambda {lambda} must be non-negative")));
    }
    let (m, g) = pred.value().dims2()?;
    let (tm, tg) = target.dims2()?;
    if m != tm || g != tg {
        return Err(Error::Dimension(format!(
            "predictions {m}x{g} vs targets {tm}x{tg}"
        )));
    }
    let diff = pred.sub(pred.tape_constant(target.clone()))?;
    let mse = diff.mul(diff)?.sum_all().scale(1.0 / m as f64);
    if lambda == 0.0 {
        return Ok(mse);
    }
    let (y_cells, labels) = cells.ok_or_else(|| {
        Error::Contract("lambda > 0 needs per-cell expression and labels".into())
    })?;
    mse.add(cluster_loss(y_cells, labels)?.scale(lambda))
}

/// Patience-based stopping on validation loss: stop after `patience`
/// consecutive epochs without strict improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    epoch: usize,
    best_loss: f64,
    best_epoch: usize,
    streak: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            epoch: 0,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            streak: 0,
        }
    }

    /// Record one epoch's validation loss. Returns `true` when
    /// training should stop. The first call is epoch 1.
    pub fn observe(&mut self, val_loss: f64) -> bool {
        self.epoch += 1;
        if val_loss < self.best_loss {
            self.best_loss = val_loss;
            self.best_epoch = self.epoch;
            self.streak = 0;
        } else {
            self.streak += 1;
        }
        self.streak >= self.patience
    }

    pub fn improved(&self) -> bool {
        self.best_epoch == self.epoch
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best_loss
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Fit k-means phenotypes on the training cells, store the centroids
/// in the tree, and label every cell of both sets.
pub fn prepare_phenotypes(
    tree: &mut ParamTree,
    train: &mut BagSet,
    val: &mut BagSet,
    seed: u64,
) -> Result<()> {
    let pooled = train.pooled_features()?;
    let k = tree.arch.k_clusters;
    let (model, _) = kmeans_fit(&pooled, k, seed, 100)?;
    tree.set_tensor("cluster.centroids", model.centroids.clone())?;
    train.assign_labels(&model);
    val.assign_labels(&model);
    Ok(())
}

/// Forward every bag of a batch on one tape and assemble the
/// composite loss.
fn batch_loss<'t>(
    tape: &'t Tape,
    tree: &ParamTree,
    set: &BagSet,
    batch: &[usize],
    lambda: f64,
    train: bool,
    drop: Option<&mut Dropout>,
) -> Result<Var<'t>> {
    let vars = stage_vars(tape, tree, train)?;
    let mut pred_rows: Vec<Var<'t>> = Vec::with_capacity(batch.len());
    let mut target_rows: Vec<Vec<f64>> = Vec::with_capacity(batch.len());
    let mut cell_preds: Vec<Var<'t>> = Vec::new();
    let mut cell_labels: Vec<usize> = Vec::new();
    let mut drop = drop;
    for &i in batch {
        let bag = set.bag(i);
        let target = bag.target.as_ref().ok_or_else(|| {
            Error::Contract(format!("bag {} has no supervision target", bag.unit_id))
        })?;
        let coords = set.bag_coords(i);
        let features = tape.constant(set.bag_features(i));
        let fwd = forward_bag(
            &vars,
            &tree.arch,
            &coords,
            features,
            bag.patch_of.as_deref(),
            drop.as_deref_mut(),
        )?;
        pred_rows.push(fwd.y.transpose()?);
        target_rows.push(target.clone());
        if lambda > 0.0 {
            let labels = set.bag_labels(i).ok_or_else(|| {
                Error::Contract(format!(
                    "bag {} has no phenotype labels; fit clusters first",
                    bag.unit_id
                ))
            })?;
            cell_preds.push(deconvolve(fwd.attention, fwd.y)?);
            cell_labels.extend(labels);
        }
    }
    let mut pred = pred_rows[0];
    for row in &pred_rows[1..] {
        pred = pred.concat(*row, 0)?;
    }
    let target = Tensor::from_rows(&target_rows)?;
    let cells = if lambda > 0.0 {
        let mut all = cell_preds[0];
        for c in &cell_preds[1..] {
            all = all.concat(*c, 0)?;
        }
        Some((all, cell_labels.as_slice()))
    } else {
        None
    };
    total_loss(pred, &target, cells, lambda)
}

/// Composite loss of a whole set under the current weights, without
/// gradients or dropout.
pub fn eval_loss(tree: &ParamTree, set: &BagSet, lambda: f64) -> Result<f64> {
    if set.n_bags() == 0 {
        return Err(Error::Contract("cannot evaluate an empty bag set".into()));
    }
    let batch: Vec<usize> = (0..set.n_bags()).collect();
    let tape = Tape::new();
    let loss = batch_loss(&tape, tree, set, &batch, lambda, false, None)?;
    Ok(loss.value().item()?)
}

/// Adam with gradient clipping over shuffled batches; early stopping
/// on validation loss with the configured patience. The tree ends at
/// the best-validation epoch, never the last. One history row per
/// completed epoch.
pub fn fit(
    tree: &mut ParamTree,
    train: &BagSet,
    val: &BagSet,
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if train.n_bags() == 0 {
        return Err(Error::Contract("training set has no bags".into()));
    }
    if val.n_bags() == 0 {
        return Err(Error::Contract("validation set has no bags".into()));
    }
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    let mut adam = AdamState::new(cfg.lr, cfg.clip);
    let mut dropout = if cfg.dropout > 0.0 {
        Some(Dropout::new(cfg.dropout, cfg.seed.wrapping_add(0x9e3779b97f4a7c15)))
    } else {
        None
    };
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<ParamTree> = None;
    let mut order: Vec<usize> = (0..train.n_bags()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut bag_count = 0usize;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let tape = Tape::new();
            let loss = batch_loss(
                &tape,
                tree,
                train,
                batch,
                cfg.lambda,
                true,
                dropout.as_mut(),
            )?;
            let value = loss.value().item()?;
            if !value.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {epoch}, step {}",
                    step + 1
                )));
            }
            loss_sum += value * batch.len() as f64;
            bag_count += batch.len();
            let grads = loss.backward()?;
            adam.step(tree, &grads)?;
        }
        let train_loss = loss_sum / bag_count as f64;
        let val_loss = eval_loss(tree, val, cfg.lambda)?;
        if !val_loss.is_finite() {
            return Err(Error::Training(format!(
                "non-finite validation loss after epoch {epoch}"
            )));
        }
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
        });
        let stop = stopper.observe(val_loss);
        if stopper.improved() {
            best = Some(tree.clone());
        }
        if stop {
            break;
        }
    }
    if let Some(best) = best {
        *tree = best;
    }
    Ok(history)
}

/// Rebuild the gene head for a new panel: rows of shared genes are
/// copied from the pretrained head, rows for unseen genes are freshly
/// initialized. Returns the new tree and the per-row "new gene" mask.
pub fn rehead_genes(
    tree: &ParamTree,
    target_genes: &[String],
    seed: u64,
) -> Result<(ParamTree, Vec<bool>)> {
    if target_genes.is_empty() {
        return Err(Error::Transfer("target gene set is empty".into()));
    }
    {
        let mut seen = std::collections::HashSet::new();
        for g in target_genes {
            if !seen.insert(g.as_str()) {
                return Err(Error::Transfer(format!("duplicate target gene {g:?}")));
            }
        }
    }
    let shared = target_genes
        .iter()
        .filter(|g| tree.arch.genes.contains(g))
        .count();
    if shared == 0 {
        return Err(Error::Transfer(format!(
            "no overlap between {} pretrained and {} target genes",
            tree.arch.genes.len(),
            target_genes.len()
        )));
    }
    let d = tree.arch.d_model;
    let old = tree.tensor("mil.q_gene")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(target_genes.len());
    let mut fresh = Vec::with_capacity(target_genes.len());
    for gene in target_genes {
        match tree.arch.genes.iter().position(|g| g == gene) {
            Some(i) => {
                rows.push(old.data()[i * d..(i + 1) * d].to_vec());
                fresh.push(false);
            }
            None => {
                rows.push(randn(&[1, d], 1.0 / (d as f64).sqrt(), &mut rng).into_data());
                fresh.push(true);
            }
        }
    }
    let mut out = tree.clone();
    out.arch.genes = target_genes.to_vec();
    // Target stats belong to the new panel; the pipeline refits them.
    out.arch.norm_stats = None;
    let entry = out
        .get_mut("mil.q_gene")
        .ok_or_else(|| Error::Config("missing parameter mil.q_gene".into()))?;
    entry.tensor = Tensor::from_rows(&rows)?;
    entry.row_mask = None;
    Ok((out, fresh))
}

/// Set up a pretrained tree for finetuning on a (possibly different)
/// gene panel. With `lora_rank = Some(r)` the base freezes and
/// adapters carry the update; freshly re-headed gene rows train at
/// full rate either way.
pub fn prepare_transfer(
    tree: &ParamTree,
    target_genes: &[String],
    lora_rank: Option<usize>,
    lora_alpha: f64,
    seed: u64,
) -> Result<ParamTree> {
    let (mut out, fresh) = rehead_genes(tree, target_genes, seed)?;
    let any_fresh = fresh.iter().any(|&f| f);
    match lora_rank {
        Some(rank) => {
            let targets = lora::default_targets(&out);
            lora::attach_lora(&mut out, &targets, rank, lora_alpha, seed.wrapping_add(1))?;
            if any_fresh {
                out.set_trainable("mil.q_gene", true)?;
                out.set_row_mask("mil.q_gene", Some(fresh))?;
            }
        }
        None => {
            let weights: Vec<String> = out
                .names()
                .filter(|n| !n.starts_with("pca.") && !n.starts_with("cluster."))
                .map(String::from)
                .collect();
            for name in weights {
                out.set_trainable(&name, true)?;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::bags::Bag;
    use crate::ingest::tsv::CellTable;
    use crate::model::{init_params, ModelConfig};
    use crate::params::Extent;

    fn small_arch(genes: usize, normalize: bool) -> crate::params::ArchConfig {
        let cfg = ModelConfig {
            d_model: 4,
            gat_layers: 1,
            gat_heads: 2,
            leaky_slope: 0.2,
            knn_k: 2,
            trf_layers: 1,
            trf_heads: 2,
            d_ff: 8,
            n_pos: 8,
            d_readout: 4,
            use_softplus: !normalize,
            k_clusters: 2,
            normalize,
        };
        cfg.to_arch(
            (0..genes).map(|i| format!("G{i}")).collect(),
            Extent {
                x_min: 0.0,
                x_max: 10.0,
                y_min: 0.0,
                y_max: 10.0,
            },
            4,
            0,
            None,
        )
    }

    /// Cells whose first feature coordinate determines the target:
    /// learnable by the model class.
    fn toy_sets(seed: u64, n_bags: usize) -> (BagSet, BagSet) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut make = |bags: usize, offset: usize| -> BagSet {
            let per = 3usize;
            let n = bags * per;
            let coords: Vec<(f64, f64)> = (0..n)
                .map(|_| (rng.gen::<f64>() * 10.0, rng.gen::<f64>() * 10.0))
                .collect();
            let mut feats = Vec::new();
            for _ in 0..n {
                let base: f64 = rng.gen::<f64>() * 2.0 - 1.0;
                feats.push(vec![
                    base,
                    -base,
                    rng.gen::<f64>() * 0.1,
                    rng.gen::<f64>() * 0.1,
                ]);
            }
            let table = CellTable::new(
                format!("s{offset}"),
                (0..n as u64).collect(),
                coords,
                Tensor::from_rows(&feats).unwrap(),
            )
            .unwrap();
            let mut set = BagSet::new(vec![table]);
            for b in 0..bags {
                let members: Vec<usize> = (b * per..(b + 1) * per).collect();
                let target: f64 = members.iter().map(|&i| feats[i][0]).sum();
                set.push_bag(
                    0,
                    Bag {
                        unit_id: format!("u{b}"),
                        members,
                        target: Some(vec![target]),
                        unit_xy: None,
                        patch_of: None,
                    },
                )
                .unwrap();
            }
            set
        };
        (make(n_bags, 0), make(3, 1))
    }

    fn grid_cfg(epochs: usize, lambda: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: 1e-3,
            epochs,
            lambda,
            seed,
            batch_size: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn early_stopper_follows_the_example_sequence() {
        let losses = [5.0, 4.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0];
        let mut stopper = EarlyStopper::new(6);
        let mut stopped_at = None;
        for (i, &l) in losses.iter().enumerate() {
            if stopper.observe(l) {
                stopped_at = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped_at, Some(9));
        assert_eq!(stopper.best_epoch(), 3);
        assert_eq!(stopper.best_loss(), 3.0);
    }

    #[test]
    fn early_stopper_resets_streak_on_improvement() {
        let mut stopper = EarlyStopper::new(2);
        assert!(!stopper.observe(5.0));
        assert!(!stopper.observe(6.0));
        assert!(!stopper.observe(4.0));
        assert!(!stopper.observe(4.5));
        assert!(stopper.observe(4.2));
        assert_eq!(stopper.best_epoch(), 3);
    }

    #[test]
    fn total_loss_hand_example() {
        let tape = Tape::new();
        let pred = tape.constant(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
        let target = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        let loss = total_loss(pred, &target, None, 0.0).unwrap();
        assert_eq!(loss.value().item().unwrap(), 4.0);
    }

    #[test]
    fn total_loss_zero_when_exact_and_clustered_tight() {
        let tape = Tape::new();
        let pred = tape.constant(Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap());
        let target = Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap();
        // Four cells, two clusters, identical within each cluster.
        let cells = tape.constant(Tensor::from_rows(&vec![
            vec![0.5],
            vec![0.5],
            vec![2.0],
            vec![2.0],
        ]).unwrap());
        let labels = [0usize, 0, 1, 1];
        let loss = total_loss(pred, &target, Some((cells, &labels)), 0.4).unwrap();
        assert_eq!(loss.value().item().unwrap(), 0.0);
    }

    #[test]
    fn lambda_zero_is_exactly_the_mse() {
        let tape = Tape::new();
        let pred = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let target = Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 1.0]).unwrap();
        let cells = tape.constant(Tensor::from_rows(&vec![vec![9.0, 9.0]]).unwrap());
        let labels = [0usize];
        let with = total_loss(pred, &target, Some((cells, &labels)), 0.0)
            .unwrap()
            .value()
            .item()
            .unwrap();
        // (1/2) * ((1 + 1) + (4 + 9)) = 7.5
        assert_eq!(with, 7.5);
    }

    #[test]
    fn negative_lambda_rejected() {
        let tape = Tape::new();
        let pred = tape.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let target = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        assert!(total_loss(pred, &target, None, -0.1).is_err());
    }

    #[test]
    fn config_grid_is_enforced() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.lr = 2e-3;
        assert!(cfg.validate().is_err());
        cfg.lr = 1e-3;
        cfg.epochs = 101;
        assert!(cfg.validate().is_err());
        cfg.epochs = 50;
        cfg.lambda = 0.7;
        assert!(cfg.validate().is_err());
        cfg.lambda = 0.0;
        cfg.dropout = 0.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn fit_learns_a_linear_signal() {
        let arch = small_arch(1, true);
        let mut tree = init_params(arch, 3).unwrap();
        let (mut train_set, mut val_set) = toy_sets(1, 12);
        prepare_phenotypes(&mut tree, &mut train_set, &mut val_set, 0).unwrap();
        let before = eval_loss(&tree, &train_set, 0.0).unwrap();
        let cfg = grid_cfg(30, 0.0, 1);
        let history = fit(&mut tree, &train_set, &val_set, &cfg).unwrap();
        let after = eval_loss(&tree, &train_set, 0.0).unwrap();
        assert!(
            after < before * 0.5,
            "loss went {before} -> {after} over {} epochs",
            history.len()
        );
    }

    #[test]
    fn fit_is_deterministic_per_seed() {
        let arch = small_arch(1, true);
        let (mut train_set, mut val_set) = toy_sets(2, 6);
        let mut t1 = init_params(arch.clone(), 3).unwrap();
        prepare_phenotypes(&mut t1, &mut train_set, &mut val_set, 0).unwrap();
        let mut t2 = t1.clone();
        let cfg = grid_cfg(5, 0.3, 7);
        let h1 = fit(&mut t1, &train_set, &val_set, &cfg).unwrap();
        let h2 = fit(&mut t2, &train_set, &val_set, &cfg).unwrap();
        assert_eq!(h1, h2);
        for (name, e1) in t1.iter() {
            let e2 = t2.get(name).unwrap();
            assert_eq!(e1.tensor.data(), e2.tensor.data(), "{name} diverged");
        }
        let cfg_other = grid_cfg(5, 0.3, 8);
        let mut t3 = {
            let mut t = init_params(arch, 3).unwrap();
            prepare_phenotypes(&mut t, &mut train_set.clone(), &mut val_set.clone(), 0).unwrap();
            t
        };
        let h3 = fit(&mut t3, &train_set, &val_set, &cfg_other).unwrap();
        assert_ne!(h1, h3, "different seeds should shuffle differently");
    }

    #[test]
    fn fit_returns_the_best_validation_weights() {
        let arch = small_arch(1, true);
        let mut tree = init_params(arch, 5).unwrap();
        let (mut train_set, mut val_set) = toy_sets(3, 8);
        prepare_phenotypes(&mut tree, &mut train_set, &mut val_set, 0).unwrap();
        let cfg = grid_cfg(12, 0.0, 2);
        let history = fit(&mut tree, &train_set, &val_set, &cfg).unwrap();
        let best_seen = history
            .iter()
            .map(|e| e.val_loss)
            .fold(f64::INFINITY, f64::min);
        let returned = eval_loss(&tree, &val_set, 0.0).unwrap();
        assert!(
            (returned - best_seen).abs() < 1e-12,
            "returned {returned}, best seen {best_seen}"
        );
    }

    #[test]
    fn non_finite_target_aborts_with_epoch_and_step() {
        let arch = small_arch(1, true);
        let mut tree = init_params(arch, 3).unwrap();
        let (mut train_set, mut val_set) = toy_sets(4, 4);
        prepare_phenotypes(&mut tree, &mut train_set, &mut val_set, 0).unwrap();
        train_set.bags[0].1.target = Some(vec![f64::NAN]);
        let cfg = grid_cfg(3, 0.0, 1);
        let err = fit(&mut tree, &train_set, &val_set, &cfg).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("epoch 1"), "{msg}");
        assert!(msg.contains("step"), "{msg}");
    }

    #[test]
    fn zero_epochs_leave_the_tree_untouched() {
        let arch = small_arch(1, true);
        let mut tree = init_params(arch, 3).unwrap();
        let snapshot = tree.clone();
        let (mut train_set, mut val_set) = toy_sets(5, 4);
        prepare_phenotypes(&mut tree, &mut train_set, &mut val_set, 0).unwrap();
        tree.set_tensor("cluster.centroids", snapshot.tensor("cluster.centroids").unwrap().clone())
            .unwrap();
        let cfg = grid_cfg(0, 0.0, 1);
        let history = fit(&mut tree, &train_set, &val_set, &cfg).unwrap();
        assert!(history.is_empty());
        for (name, e) in tree.iter() {
            assert_eq!(
                e.tensor.data(),
                snapshot.get(name).unwrap().tensor.data(),
                "{name} changed"
            );
        }
    }

    #[test]
    fn rehead_copies_shared_rows_and_masks_fresh_ones() {
        let arch = small_arch(3, true);
        let tree = init_params(arch, 9).unwrap();
        // Pretrained panel is {G0, G1, G2}; target {G1, G2, NEW}.
        let target: Vec<String> = vec!["G1".into(), "G2".into(), "NEW".into()];
        let (reheaded, fresh) = rehead_genes(&tree, &target, 4).unwrap();
        assert_eq!(fresh, vec![false, false, true]);
        assert_eq!(reheaded.arch.genes, target);
        let old = tree.tensor("mil.q_gene").unwrap();
        let new = reheaded.tensor("mil.q_gene").unwrap();
        let d = 4;
        assert_eq!(&new.data()[0..d], &old.data()[d..2 * d]);
        assert_eq!(&new.data()[d..2 * d], &old.data()[2 * d..3 * d]);
        assert_ne!(&new.data()[2 * d..3 * d], &old.data()[0..d]);
    }

    #[test]
    fn disjoint_gene_sets_fail_transfer() {
        let arch = small_arch(2, true);
        let tree = init_params(arch, 9).unwrap();
        let err = rehead_genes(&tree, &["X".into(), "Y".into()], 0).unwrap_err();
        assert!(matches!(err, Error::Transfer(_)));
    }

    #[test]
    fn lora_transfer_trains_only_adapters_and_fresh_rows() {
        let arch = small_arch(2, true);
        let tree = init_params(arch, 9).unwrap();
        let staged =
            prepare_transfer(&tree, &["G1".into(), "NEW".into()], Some(2), 4.0, 11).unwrap();
        for (name, entry) in staged.iter() {
            let expect = name.starts_with("lora.") && !name.ends_with("meta")
                || name == "mil.q_gene";
            assert_eq!(entry.trainable, expect, "{name}");
        }
        let mask = staged.get("mil.q_gene").unwrap().row_mask.clone().unwrap();
        assert_eq!(mask, vec![false, true]);
        // Identical panel: head stays frozen entirely.
        let same = prepare_transfer(&tree, &["G0".into(), "G1".into()], Some(2), 4.0, 11).unwrap();
        assert!(!same.get("mil.q_gene").unwrap().trainable);
    }

    #[test]
    fn full_transfer_unfreezes_weights_but_not_stats() {
        let arch = small_arch(2, true);
        let tree = init_params(arch, 9).unwrap();
        let staged = prepare_transfer(&tree, &["G0".into(), "NEW".into()], None, 0.0, 5).unwrap();
        assert!(staged.get("mil.q_gene").unwrap().trainable);
        assert!(staged.get("trf.0.q").unwrap().trainable);
        assert!(!staged.get("cluster.centroids").unwrap().trainable);
    }

    #[test]
    fn lambda_training_needs_labels() {
        let arch = small_arch(1, true);
        let mut tree = init_params(arch, 3).unwrap();
        let (train_set, val_set) = toy_sets(6, 4);
        // Skip prepare_phenotypes: labels missing.
        let cfg = grid_cfg(2, 0.3, 1);
        let err = fit(&mut tree, &train_set, &val_set, &cfg).unwrap_err();
        assert!(err.to_string().contains("labels"), "{err}");
    }
}
