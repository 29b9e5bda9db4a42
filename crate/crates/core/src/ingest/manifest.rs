//! Dataset manifest: a JSON file naming the task kind, gene list, patch
//! size, and per-sample cell/expression tables.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Deserialize;

use crate::error::{Error, Result};

use super::tsv::{read_cells, read_expr, CellTable, ExpressionFrame, Space};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Bulk,
    Spot,
}

impl TaskKind {
    pub fn tag(self) -> &'static str {
        match self {
            TaskKind::Bulk => "bulk",
            TaskKind::Spot => "spot",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SampleEntry {
    pub id: String,
    pub cells: PathBuf,
    pub expr: PathBuf,
}

#[derive(Debug, Clone)]
pub struct DatasetDescriptor {
    pub task: TaskKind,
    /// Path to a one-gene-per-line list, when the manifest pins one.
    pub genes: Option<PathBuf>,
    pub patch_px: f64,
    /// Declared unit of raw expression values: "counts" or "tpm".
    pub units: String,
    pub samples: Vec<SampleEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    task: String,
    #[serde(default)]
    genes: Option<String>,
    patch_px: f64,
    #[serde(default)]
    units: Option<String>,
    samples: Vec<RawSample>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSample {
    id: String,
    cells: String,
    expr: String,
}

/// Parse `manifest.json`, resolving referenced paths relative to the
/// manifest's directory and checking they exist.
pub fn load_manifest(path: &Path) -> Result<DatasetDescriptor> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: RawManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let task = match raw.task.as_str() {
        "bulk" => TaskKind::Bulk,
        "spot" => TaskKind::Spot,
        other => {
            return Err(Error::Parse(format!(
                "{}: field \"task\" must be \"bulk\" or \"spot\", got {other:?}",
                path.display()
            )))
        }
    };
    if !(raw.patch_px > 0.0) {
        return Err(Error::Parse(format!(
            "{}: field \"patch_px\" must be positive",
            path.display()
        )));
    }
    let units = raw.units.unwrap_or_else(|| "counts".into());
    if units != "counts" && units != "tpm" {
        return Err(Error::Parse(format!(
            "{}: field \"units\" must be \"counts\" or \"tpm\", got {units:?}",
            path.display()
        )));
    }
    if raw.samples.is_empty() {
        return Err(Error::Parse(format!(
            "{}: field \"samples\" must list at least one sample",
            path.display()
        )));
    }
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let resolve = |rel: &str| -> Result<PathBuf> {
        let p = base.join(rel);
        if !p.exists() {
            return Err(Error::Dataset(format!(
                "manifest references missing file {}",
                p.display()
            )));
        }
        Ok(p)
    };
    let genes = raw.genes.as_deref().map(resolve).transpose()?;
    let mut seen = std::collections::HashSet::new();
    let mut samples = Vec::with_capacity(raw.samples.len());
    for s in &raw.samples {
        if !seen.insert(s.id.clone()) {
            return Err(Error::Parse(format!(
                "{}: duplicate sample id {:?}",
                path.display(),
                s.id
            )));
        }
        samples.push(SampleEntry {
            id: s.id.clone(),
            cells: resolve(&s.cells)?,
            expr: resolve(&s.expr)?,
        });
    }
    Ok(DatasetDescriptor {
        task,
        genes,
        patch_px: raw.patch_px,
        units,
        samples,
    })
}

/// Read every sample's tables, in manifest order; parsing fans out
/// across samples.
pub fn load_samples(desc: &DatasetDescriptor) -> Result<Vec<(CellTable, ExpressionFrame)>> {
    desc.samples
        .par_iter()
        .map(|s| {
            let cells = read_cells(&s.cells, &s.id)?;
            let expr = read_expr(&s.expr, Space::RawCounts)?;
            if desc.task == TaskKind::Spot && expr.unit_coords.is_none() {
                return Err(Error::Dataset(format!(
                    "sample {}: spot task but expression table has no coordinates",
                    s.id
                )));
            }
            if desc.task == TaskKind::Bulk && expr.unit_coords.is_some() {
                return Err(Error::Dataset(format!(
                    "sample {}: bulk task but expression table has coordinates",
                    s.id
                )));
            }
            Ok((cells, expr))
        })
        .collect()
}

/// One gene symbol per line; blank lines skipped.
pub fn read_gene_list(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let genes: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if genes.is_empty() {
        return Err(Error::Parse(format!("{}: no genes listed", path.display())));
    }
    Ok(genes)
}

pub fn write_gene_list(path: &Path, genes: &[String]) -> Result<()> {
    let mut out = String::new();
    for g in genes {
        out.push_str(g);
        out.push('\n');
    }
    super::tsv::write_atomic(path, out.as_bytes())
}
