//! Named parameter tensors and the on-disk checkpoint container.
//!
//! A [`ParamTree`] pairs an architecture header with a sorted map of
//! tensors. The binary layout is stable: magic `BITRO1`, a u32-LE
//! length-prefixed JSON header, then one record per tensor (u32-LE name
//! length, UTF-8 name, u32-LE rank, u64-LE extents, f64-LE data) in
//! name order. Trainable flags and row masks are runtime state and are
//! not persisted.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 6] = b"BITRO1";

/// Slide-frame bounding box used to quantize coordinates into bins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Extent {
    pub fn from_points(coords: &[(f64, f64)]) -> Self {
        let mut e = Extent {
            x_min: f64::INFINITY,
            x_max: f64::NEG_INFINITY,
            y_min: f64::INFINITY,
            y_max: f64::NEG_INFINITY,
        };
        for &(x, y) in coords {
            e.x_min = e.x_min.min(x);
            e.x_max = e.x_max.max(x);
            e.y_min = e.y_min.min(y);
            e.y_max = e.y_max.max(y);
        }
        e
    }
}

/// Per-gene mean and standard deviation from the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Everything needed to rebuild the model around the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub d_model: usize,
    pub feature_dim: usize,
    pub pca_dim: usize,
    pub genes: Vec<String>,
    pub gat_layers: usize,
    pub gat_heads: usize,
    pub leaky_slope: f64,
    pub knn_k: usize,
    pub trf_layers: usize,
    pub trf_heads: usize,
    pub d_ff: usize,
    pub n_pos: usize,
    pub extent: Extent,
    pub d_readout: usize,
    pub use_softplus: bool,
    pub k_clusters: usize,
    pub normalize: bool,
    pub norm_stats: Option<NormStats>,
}

impl ArchConfig {
    pub fn n_genes(&self) -> usize {
        self.genes.len()
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub tensor: Tensor,
    pub trainable: bool,
    /// When set, only rows flagged true receive gradient updates.
    pub row_mask: Option<Vec<bool>>,
}

/// Architecture header plus named tensors, sorted by name.
#[derive(Debug, Clone)]
pub struct ParamTree {
    pub arch: ArchConfig,
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamTree {
    pub fn new(arch: ArchConfig) -> Self {
        ParamTree {
            arch,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                tensor,
                trainable: true,
                row_mask: None,
            },
        );
    }

    pub fn remove(&mut self, name: &str) -> Option<ParamEntry> {
        self.entries.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn set_tensor(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if entry.tensor.shape() != tensor.shape() {
            return Err(Error::Dimension(format!(
                "parameter {name}: shape {:?} cannot replace {:?}",
                tensor.shape(),
                entry.tensor.shape()
            )));
        }
        entry.tensor = tensor;
        Ok(())
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.entries
            .get_mut(name)
            .map(|e| e.trainable = trainable)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn set_row_mask(&mut self, name: &str, mask: Option<Vec<bool>>) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if let Some(m) = &mask {
            let rows = entry.tensor.shape().first().copied().unwrap_or(0);
            if m.len() != rows {
                return Err(Error::Dimension(format!(
                    "row mask len {} vs {} rows in {name}",
                    m.len(),
                    rows
                )));
            }
        }
        entry.row_mask = mask;
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        for e in self.entries.values_mut() {
            e.trainable = false;
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total element count across all tensors.
    pub fn n_values(&self) -> usize {
        self.entries.values().map(|e| e.tensor.len()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        let header = serde_json::to_vec(&self.arch)
            .map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header);
        for (name, entry) in &self.entries {
            let t = &entry.tensor;
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &e in t.shape() {
                buf.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::io(path, e))?
            .read_to_end(&mut buf)
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > buf.len() {
                return Err(Error::Checkpoint(format!(
                    "truncated at byte {} (wanted {n} more of {})",
                    *pos,
                    buf.len()
                )));
            }
            let s = &buf[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let magic = take(&mut pos, 6)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a model file".into()));
        }
        let header_len =
            u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let arch: ArchConfig = serde_json::from_slice(take(&mut pos, header_len)?)
            .map_err(|e| Error::Checkpoint(format!("header decode: {e}")))?;
        let mut tree = ParamTree::new(arch);
        while pos < buf.len() {
            let name_len =
                u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(&mut pos, name_len)?)
                .map_err(|e| Error::Checkpoint(format!("tensor name not UTF-8: {e}")))?
                .to_string();
            let rank =
                u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape
                    .push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap())
                        as usize);
            }
            let n: usize = shape.iter().product();
            let raw = take(&mut pos, n * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tree.insert(&name, Tensor::new(shape, data)?);
        }
        Ok(tree)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
            d_model: 4,
            feature_dim: 4,
            pca_dim: 0,
            genes: vec!["GENE_A".into(), "GENE_B".into()],
            gat_layers: 1,
            gat_heads: 2,
            leaky_slope: 0.2,
            knn_k: 2,
            trf_layers: 1,
            trf_heads: 2,
            d_ff: 8,
            n_pos: 16,
            extent: Extent {
                x_min: 0.0,
                x_max: 10.0,
                y_min: 0.0,
                y_max: 10.0,
            },
            d_readout: 4,
            use_softplus: true,
            k_clusters: 2,
            normalize: false,
            norm_stats: None,
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bitro");
        let mut tree = ParamTree::new(tiny_arch());
        tree.insert("b", Tensor::from_rows(&[vec![1.5, -2.25]]).unwrap());
        tree.insert("a", Tensor::vector(&[0.1, 0.2, 0.3]));
        tree.save(&path).unwrap();
        let back = ParamTree::load(&path).unwrap();
        assert_eq!(back.arch, tree.arch);
        assert_eq!(back.len(), 2);
        assert_eq!(back.tensor("a").unwrap(), tree.tensor("a").unwrap());
        assert_eq!(back.tensor("b").unwrap(), tree.tensor("b").unwrap());
    }

    #[test]
    fn save_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.bitro");
        let p2 = dir.path().join("b.bitro");
        let mut tree = ParamTree::new(tiny_arch());
        // Insertion order must not matter: entries serialize in name order.
        tree.insert("z", Tensor::scalar(1.0));
        tree.insert("a", Tensor::scalar(2.0));
        tree.save(&p1).unwrap();
        let mut tree2 = ParamTree::new(tiny_arch());
        tree2.insert("a", Tensor::scalar(2.0));
        tree2.insert("z", Tensor::scalar(1.0));
        tree2.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn bad_magic_rejected() {
        let err = ParamTree::from_bytes(b"NOTBITRO").unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bitro");
        let mut tree = ParamTree::new(tiny_arch());
        tree.insert("a", Tensor::vector(&[1.0, 2.0, 3.0]));
        tree.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = &bytes[..bytes.len() - 5];
        assert!(matches!(
            ParamTree::from_bytes(cut),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn row_mask_length_checked() {
        let mut tree = ParamTree::new(tiny_arch());
        tree.insert("q", Tensor::zeros(&[3, 2]));
        assert!(tree.set_row_mask("q", Some(vec![true, false])).is_err());
        assert!(tree
            .set_row_mask("q", Some(vec![true, false, true]))
            .is_ok());
    }

    #[test]
    fn set_tensor_shape_guard() {
        let mut tree = ParamTree::new(tiny_arch());
        tree.insert("q", Tensor::zeros(&[3, 2]));
        assert!(tree.set_tensor("q", Tensor::zeros(&[2, 3])).is_err());
        assert!(tree.set_tensor("q", Tensor::full(&[3, 2], 1.0)).is_ok());
    }
}
