//! Synthetic datasets with planted ground truth: cell types with known
//! feature signatures and expression profiles, spatially clustered
//! cells, and spot/bulk targets that are exact sums of per-cell
//! profiles at zero noise.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingest::manifest::{load_manifest, DatasetDescriptor, TaskKind};
use crate::ingest::tsv::{write_atomic, write_cells, write_expr, CellTable, ExpressionFrame, Space};
use crate::tensor::{randn, Tensor};

pub const DEFAULT_FEATURES: usize = 16;
pub const DEFAULT_GENES: usize = 32;
pub const DEFAULT_TYPES: usize = 4;
pub const DEFAULT_NOISE: f64 = 0.1;
/// Spot grid pitch in pixels; equals the patch size, so patches tile
/// the slide and every cell lands in exactly one spot.
pub const SPOT_PITCH: f64 = 224.0;

/// The hidden generative model: K cell types, each with a feature-mean
/// row and a non-negative expression profile over G genes.
#[derive(Debug, Clone)]
pub struct PlantedWorld {
    pub seed: u64,
    pub d: usize,
    pub g: usize,
    pub k_types: usize,
    /// Feature noise SD, and the factor on Poisson-like expression
    /// noise (variance = noise * mean).
    pub noise: f64,
    /// K x D.
    pub type_feature_means: Tensor,
    /// K x G, entries >= 0.
    pub type_expression_profiles: Tensor,
}

impl PlantedWorld {
    pub fn new(seed: u64, d: usize, g: usize, k_types: usize, noise: f64) -> Result<Self> {
        if d == 0 || g == 0 || k_types == 0 {
            return Err(Error::Contract("world dimensions must be positive".into()));
        }
        if noise < 0.0 {
            return Err(Error::Contract(format!("noise {noise} must be non-negative")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Means pulled apart so types are decodable from features.
        let type_feature_means = randn(&[k_types, d], 2.0, &mut rng);
        let mut profiles = vec![0.0; k_types * g];
        for k in 0..k_types {
            for j in 0..g {
                let base: f64 = rng.gen::<f64>() * 2.0;
                // Each gene leans on one "home" type, so composition
                // shifts move every gene.
                let boost = if j % k_types == k { 6.0 + rng.gen::<f64>() * 2.0 } else { 0.0 };
                profiles[k * g + j] = base + boost;
            }
        }
        Ok(PlantedWorld {
            seed,
            d,
            g,
            k_types,
            noise,
            type_feature_means,
            type_expression_profiles: Tensor::new(vec![k_types, g], profiles)?,
        })
    }

    pub fn with_defaults(seed: u64) -> Result<Self> {
        Self::new(seed, DEFAULT_FEATURES, DEFAULT_GENES, DEFAULT_TYPES, DEFAULT_NOISE)
    }

    pub fn gene_names(&self) -> Vec<String> {
        (0..self.g).map(|j| format!("GEN{j:03}")).collect()
    }

    fn profile(&self, t: usize) -> &[f64] {
        &self.type_expression_profiles.data()[t * self.g..(t + 1) * self.g]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SynthSpec {
    pub n_samples: usize,
    pub spots_per_sample: usize,
    pub cells_per_spot: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_samples: 6,
            spots_per_sample: 64,
            cells_per_spot: 24,
        }
    }
}

/// Ground truth for one generated cell.
#[derive(Debug, Clone)]
pub struct TruthRow {
    pub sample_id: String,
    pub unit_id: String,
    pub cell_id: u64,
    pub cell_type: usize,
    /// The cell's planted expression: its type profile.
    pub expr: Vec<f64>,
}

struct SampleDraw {
    table: CellTable,
    spots: ExpressionFrame,
    truth: Vec<TruthRow>,
}

fn sample_seed(world_seed: u64, sample_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(world_seed.to_le_bytes());
    h.update(sample_id.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// One sample's cells and per-spot expression. Cells cluster by type
/// inside their spot; every cell stays within the spot's patch square.
fn draw_sample(world: &PlantedWorld, sample_id: &str, spec: &SynthSpec) -> Result<SampleDraw> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(world.seed, sample_id));
    let cols = (spec.spots_per_sample as f64).sqrt().ceil() as usize;
    let half = SPOT_PITCH / 2.0;
    let mut cell_ids = Vec::new();
    let mut coords = Vec::new();
    let mut feats: Vec<f64> = Vec::new();
    let mut truth = Vec::new();
    let mut unit_ids = Vec::new();
    let mut unit_coords = Vec::new();
    let mut values = Vec::new();
    let mut next_cell: u64 = 0;
    for s in 0..spec.spots_per_sample {
        let (row, col) = (s / cols, s % cols);
        let cx = col as f64 * SPOT_PITCH + half;
        let cy = row as f64 * SPOT_PITCH + half;
        let unit_id = format!("{sample_id}_u{s}");
        let dominant = rng.gen_range(0..world.k_types);
        let mut mean_expr = vec![0.0; world.g];
        for _ in 0..spec.cells_per_spot {
            let t = if rng.gen::<f64>() < 0.7 {
                dominant
            } else {
                rng.gen_range(0..world.k_types)
            };
            // Type-specific anchor inside the spot, plus jitter, kept
            // strictly inside the patch square.
            let angle = std::f64::consts::TAU * t as f64 / world.k_types as f64;
            let r = half * 0.35;
            let jitter = half * 0.12;
            let x = (cx + r * angle.cos() + (rng.gen::<f64>() * 2.0 - 1.0) * jitter)
                .clamp(cx - half + 1.0, cx + half - 1.0);
            let y = (cy + r * angle.sin() + (rng.gen::<f64>() * 2.0 - 1.0) * jitter)
                .clamp(cy - half + 1.0, cy + half - 1.0);
            cell_ids.push(next_cell);
            coords.push((x, y));
            for j in 0..world.d {
                let noise: f64 = if world.noise > 0.0 {
                    let (u1, u2) = (rng.gen::<f64>().max(1e-300), rng.gen::<f64>());
                    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos() * world.noise
                } else {
                    0.0
                };
                feats.push(world.type_feature_means.data()[t * world.d + j] + noise);
            }
            let profile = world.profile(t);
            for j in 0..world.g {
                mean_expr[j] += profile[j];
            }
            truth.push(TruthRow {
                sample_id: sample_id.to_string(),
                unit_id: unit_id.clone(),
                cell_id: next_cell,
                cell_type: t,
                expr: profile.to_vec(),
            });
            next_cell += 1;
        }
        for j in 0..world.g {
            let mu = mean_expr[j];
            let v = if world.noise > 0.0 {
                let (u1, u2) = (rng.gen::<f64>().max(1e-300), rng.gen::<f64>());
                let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                (mu + z * (world.noise * mu).sqrt()).max(0.0)
            } else {
                mu
            };
            values.push(v);
        }
        unit_ids.push(unit_id);
        unit_coords.push((cx, cy));
    }
    let n = cell_ids.len();
    let table = CellTable::new(
        sample_id.to_string(),
        cell_ids,
        coords,
        Tensor::new(vec![n, world.d], feats)?,
    )?;
    let spots = ExpressionFrame::new(
        unit_ids,
        Some(unit_coords),
        Tensor::new(vec![spec.spots_per_sample, world.g], values)?,
        world.gene_names(),
        Space::RawCounts,
    )?;
    Ok(SampleDraw { table, spots, truth })
}

fn write_truth(path: &Path, genes: &[String], rows: &[TruthRow]) -> Result<()> {
    let mut out = String::from("sample_id\tunit_id\tcell_id\tcell_type");
    for g in genes {
        let _ = write!(out, "\tg_{g}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{}\t{}\t{}\t{}", r.sample_id, r.unit_id, r.cell_id, r.cell_type);
        for v in &r.expr {
            let _ = write!(out, "\t{v}");
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Read `truth_cells.tsv` back (oracle side of tests).
pub fn read_truth(path: &Path) -> Result<(Vec<String>, Vec<TruthRow>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse(format!("{}: empty file", path.display())))?;
    let cols: Vec<&str> = header.split('\t').collect();
    if cols.len() < 5 || cols[0] != "sample_id" || cols[3] != "cell_type" {
        return Err(Error::Parse(format!("{}: unexpected header", path.display())));
    }
    let genes: Vec<String> = cols[4..]
        .iter()
        .map(|c| {
            c.strip_prefix("g_")
                .map(String::from)
                .ok_or_else(|| Error::Parse(format!("{}: bad gene column {c:?}", path.display())))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != cols.len() {
            return Err(Error::Parse(format!("{}: ragged row", path.display())));
        }
        rows.push(TruthRow {
            sample_id: f[0].to_string(),
            unit_id: f[1].to_string(),
            cell_id: f[2]
                .parse()
                .map_err(|_| Error::Parse(format!("{}: bad cell_id {:?}", path.display(), f[2])))?,
            cell_type: f[3]
                .parse()
                .map_err(|_| Error::Parse(format!("{}: bad cell_type {:?}", path.display(), f[3])))?,
            expr: f[4..]
                .iter()
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| Error::Parse(format!("{}: bad value {v:?}", path.display())))
                })
                .collect::<Result<_>>()?,
        });
    }
    Ok((genes, rows))
}

/// Generate a dataset under `dir` and return its parsed manifest. Spot
/// tasks supervise per spot; bulk tasks sum each sample's spots into a
/// single coordinate-free unit.
pub fn generate(
    world: &PlantedWorld,
    spec: &SynthSpec,
    task: TaskKind,
    prefix: &str,
    dir: &Path,
) -> Result<DatasetDescriptor> {
    if spec.n_samples == 0 || spec.spots_per_sample == 0 || spec.cells_per_spot == 0 {
        return Err(Error::Contract("sample, spot, and cell counts must be >= 1".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let genes = world.gene_names();
    crate::ingest::manifest::write_gene_list(&dir.join("genes.txt"), &genes)?;
    let mut all_truth = Vec::new();
    let mut sample_entries = Vec::new();
    for i in 0..spec.n_samples {
        let sample_id = format!("{prefix}{i}");
        let draw = draw_sample(world, &sample_id, spec)?;
        let cells_name = format!("{sample_id}_cells.tsv");
        let expr_name = format!("{sample_id}_expr.tsv");
        write_cells(&dir.join(&cells_name), &draw.table)?;
        match task {
            TaskKind::Spot => write_expr(&dir.join(&expr_name), &draw.spots)?,
            TaskKind::Bulk => {
                let g = world.g;
                let mut total = vec![0.0; g];
                for row in 0..draw.spots.n_units() {
                    for j in 0..g {
                        total[j] += draw.spots.values.data()[row * g + j];
                    }
                }
                let bulk = ExpressionFrame::new(
                    vec![sample_id.clone()],
                    None,
                    Tensor::new(vec![1, g], total)?,
                    genes.clone(),
                    Space::RawCounts,
                )?;
                write_expr(&dir.join(&expr_name), &bulk)?;
            }
        }
        all_truth.extend(draw.truth);
        sample_entries.push((sample_id, cells_name, expr_name));
    }
    write_truth(&dir.join("truth_cells.tsv"), &genes, &all_truth)?;
    let samples_json: Vec<String> = sample_entries
        .iter()
        .map(|(id, c, e)| format!(r#"    {{ "id": "{id}", "cells": "{c}", "expr": "{e}" }}"#))
        .collect();
    let manifest = format!(
        "{{\n  \"task\": \"{}\",\n  \"genes\": \"genes.txt\",\n  \"patch_px\": {},\n  \"samples\": [\n{}\n  ]\n}}\n",
        task.tag(),
        SPOT_PITCH as u64,
        samples_json.join(",\n")
    );
    write_atomic(&dir.join("manifest.json"), manifest.as_bytes())?;
    load_manifest(&dir.join("manifest.json"))
}

/// Two datasets from one world: a spot task and a bulk task with
/// disjoint samples but identical genes and planted profiles.
pub fn paired_tasks(
    world: &PlantedWorld,
    st_spec: &SynthSpec,
    bulk_spec: &SynthSpec,
    st_dir: &Path,
    bulk_dir: &Path,
) -> Result<(DatasetDescriptor, DatasetDescriptor)> {
    let st = generate(world, st_spec, TaskKind::Spot, "st", st_dir)?;
    let bulk = generate(world, bulk_spec, TaskKind::Bulk, "blk", bulk_dir)?;
    Ok((st, bulk))
}

pub fn truth_path(dir: &Path) -> PathBuf {
    dir.join("truth_cells.tsv")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::manifest::load_samples;

    fn world(noise: f64) -> PlantedWorld {
        PlantedWorld::new(11, 4, 6, 3, noise).unwrap()
    }

    #[test]
    fn single_cell_spot_at_zero_noise_is_the_profile() {
        let w = world(0.0);
        let spec = SynthSpec {
            n_samples: 1,
            spots_per_sample: 4,
            cells_per_spot: 1,
        };
        let dir = tempfile::tempdir().unwrap();
        let desc = generate(&w, &spec, TaskKind::Spot, "s", dir.path()).unwrap();
        let samples = load_samples(&desc).unwrap();
        let (_, truth) = read_truth(&truth_path(dir.path())).unwrap();
        let expr = &samples[0].1;
        for (row, t) in truth.iter().enumerate() {
            for j in 0..w.g {
                assert_eq!(expr.values.data()[row * w.g + j], t.expr[j]);
            }
        }
    }

    #[test]
    fn same_seed_gives_byte_identical_files() {
        let w = world(0.25);
        let spec = SynthSpec {
            n_samples: 2,
            spots_per_sample: 4,
            cells_per_spot: 3,
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate(&w, &spec, TaskKind::Spot, "s", d1.path()).unwrap();
        generate(&w, &spec, TaskKind::Spot, "s", d2.path()).unwrap();
        for name in [
            "manifest.json",
            "genes.txt",
            "truth_cells.tsv",
            "s0_cells.tsv",
            "s0_expr.tsv",
            "s1_cells.tsv",
            "s1_expr.tsv",
        ] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs");
        }
    }

    #[test]
    fn spot_values_are_column_sums_of_truth_at_zero_noise() {
        let w = world(0.0);
        let spec = SynthSpec {
            n_samples: 2,
            spots_per_sample: 5,
            cells_per_spot: 4,
        };
        let dir = tempfile::tempdir().unwrap();
        let desc = generate(&w, &spec, TaskKind::Spot, "s", dir.path()).unwrap();
        let samples = load_samples(&desc).unwrap();
        let (_, truth) = read_truth(&truth_path(dir.path())).unwrap();
        for (cells, expr) in &samples {
            for (u, unit) in expr.unit_ids.iter().enumerate() {
                let mut sum = vec![0.0; w.g];
                for t in truth
                    .iter()
                    .filter(|t| &t.unit_id == unit && t.sample_id == cells.sample_id)
                {
                    for j in 0..w.g {
                        sum[j] += t.expr[j];
                    }
                }
                for j in 0..w.g {
                    let got = expr.values.data()[u * w.g + j];
                    assert!((got - sum[j]).abs() < 1e-9, "{unit} gene {j}");
                }
            }
        }
    }

    #[test]
    fn generated_data_passes_spot_assignment_without_drops() {
        let w = world(0.1);
        let spec = SynthSpec {
            n_samples: 1,
            spots_per_sample: 9,
            cells_per_spot: 5,
        };
        let dir = tempfile::tempdir().unwrap();
        let desc = generate(&w, &spec, TaskKind::Spot, "s", dir.path()).unwrap();
        let samples = load_samples(&desc).unwrap();
        let (cells, expr) = &samples[0];
        let (bags, dropped) =
            crate::ingest::bags::assign_cells_to_spots(cells, expr, desc.patch_px).unwrap();
        assert_eq!(dropped, 0);
        assert_eq!(bags.len(), 9);
        let total: usize = bags.iter().map(|b| b.n_cells()).sum();
        assert_eq!(total, 45, "every cell in exactly one spot");
    }

    #[test]
    fn paired_tasks_share_genes_and_split_samples() {
        let w = world(0.0);
        let spec = SynthSpec {
            n_samples: 2,
            spots_per_sample: 4,
            cells_per_spot: 2,
        };
        let st_dir = tempfile::tempdir().unwrap();
        let bulk_dir = tempfile::tempdir().unwrap();
        let (st, bulk) = paired_tasks(&w, &spec, &spec, st_dir.path(), bulk_dir.path()).unwrap();
        assert_eq!(st.task, TaskKind::Spot);
        assert_eq!(bulk.task, TaskKind::Bulk);
        let st_genes = crate::ingest::manifest::read_gene_list(st.genes.as_ref().unwrap()).unwrap();
        let bulk_genes =
            crate::ingest::manifest::read_gene_list(bulk.genes.as_ref().unwrap()).unwrap();
        assert_eq!(st_genes, bulk_genes);
        let st_ids: Vec<&str> = st.samples.iter().map(|s| s.id.as_str()).collect();
        let bulk_ids: Vec<&str> = bulk.samples.iter().map(|s| s.id.as_str()).collect();
        for id in &st_ids {
            assert!(!bulk_ids.contains(id));
        }
    }

    #[test]
    fn bulk_target_is_sum_of_spot_truths_at_zero_noise() {
        let w = world(0.0);
        let spec = SynthSpec {
            n_samples: 1,
            spots_per_sample: 3,
            cells_per_spot: 2,
        };
        let dir = tempfile::tempdir().unwrap();
        let desc = generate(&w, &spec, TaskKind::Bulk, "b", dir.path()).unwrap();
        let samples = load_samples(&desc).unwrap();
        let (_, truth) = read_truth(&truth_path(dir.path())).unwrap();
        let mut sum = vec![0.0; w.g];
        for t in &truth {
            for j in 0..w.g {
                sum[j] += t.expr[j];
            }
        }
        let bulk = &samples[0].1;
        assert!(bulk.unit_coords.is_none());
        for j in 0..w.g {
            assert!((bulk.values.data()[j] - sum[j]).abs() < 1e-9);
        }
    }
}
