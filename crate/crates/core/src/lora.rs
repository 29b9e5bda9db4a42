//! Low-rank adapters over frozen weight matrices.
//!
//! An adapter pair (up: d×r zero-init, down: r×k Gaussian) lives in the
//! same parameter tree as the base model under `lora.<target>.up|down`,
//! with rank and scale recorded in `lora.meta`. Zero-initialized `up`
//! makes the attached model's forward bit-identical to the base until
//! training moves the adapter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ParamTree;
use crate::tensor::{randn, Tensor};

pub const DEFAULT_RANK: usize = 8;
pub const DEFAULT_ALPHA: f64 = 16.0;

/// Every target name the default policy adapts: all transformer
/// projections plus the gene queries and first readout layer.
pub fn default_targets(tree: &ParamTree) -> Vec<String> {
    tree.names()
        .filter(|n| {
            (n.starts_with("trf.")
                && (n.ends_with(".q")
                    || n.ends_with(".k")
                    || n.ends_with(".v")
                    || n.ends_with(".o")
                    || n.ends_with(".ffn_in")
                    || n.ends_with(".ffn_out")))
                || *n == "mil.q_gene"
                || *n == "mil.w1"
        })
        .map(str::to_string)
        .collect()
}

/// Rank and scale of the adapters in `tree`, if any.
pub fn lora_meta(tree: &ParamTree) -> Option<(usize, f64)> {
    tree.tensor("lora.meta")
        .ok()
        .map(|t| (t.data()[0] as usize, t.data()[1]))
}

/// Target names recovered from adapter tensor names.
pub fn lora_targets(tree: &ParamTree) -> Vec<String> {
    tree.names()
        .filter_map(|n| {
            n.strip_prefix("lora.")
                .and_then(|rest| rest.strip_suffix(".up"))
        })
        .map(str::to_string)
        .collect()
}

/// Freeze the whole base model and add trainable adapter pairs for
/// `targets`. Each target must be a 2-D tensor.
pub fn attach_lora(
    tree: &mut ParamTree,
    targets: &[String],
    rank: usize,
    alpha: f64,
    seed: u64,
) -> Result<()> {
    if rank == 0 {
        return Err(Error::Config("LoRA rank must be at least 1".into()));
    }
    if tree.contains("lora.meta") {
        return Err(Error::Config("adapters already attached".into()));
    }
    for t in targets {
        let shape = tree.tensor(t)?.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::Config(format!(
                "LoRA target {t} is rank-{}, need a matrix",
                shape.len()
            )));
        }
    }
    tree.freeze_all();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in targets {
        let shape = tree.tensor(t)?.shape().to_vec();
        let (d, k) = (shape[0], shape[1]);
        tree.insert(&format!("lora.{t}.up"), Tensor::zeros(&[d, rank]));
        tree.insert(
            &format!("lora.{t}.down"),
            randn(&[rank, k], 1.0 / (k as f64).sqrt(), &mut rng),
        );
    }
    tree.insert("lora.meta", Tensor::vector(&[rank as f64, alpha]));
    tree.set_trainable("lora.meta", false)?;
    Ok(())
}

/// Effective weight for one target: base + (α/r)·up·down.
pub fn effective_weight(tree: &ParamTree, target: &str) -> Result<Tensor> {
    let base = tree.tensor(target)?;
    let (rank, alpha) = lora_meta(tree)
        .ok_or_else(|| Error::Config("no adapters attached".into()))?;
    let up = tree.tensor(&format!("lora.{target}.up"))?;
    let down = tree.tensor(&format!("lora.{target}.down"))?;
    base.add(&up.matmul(down)?.scale(alpha / rank as f64))
}

/// Fold every adapter into its base weight and drop the adapter tensors.
/// The result has no `lora.*` entries and every tensor trainable again.
pub fn merge_lora(tree: &ParamTree) -> Result<ParamTree> {
    if lora_meta(tree).is_none() {
        return Err(Error::Config("no adapters to merge".into()));
    }
    let mut merged = ParamTree::new(tree.arch.clone());
    for (name, entry) in tree.iter() {
        if name.starts_with("lora.") {
            continue;
        }
        let tensor = if tree.contains(&format!("lora.{name}.up")) {
            effective_weight(tree, name)?
        } else {
            entry.tensor.clone()
        };
        merged.insert(name, tensor);
    }
    Ok(merged)
}
