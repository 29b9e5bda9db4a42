//! Bags: the supervised units. A spot bag holds the cells inside one
//! spot's patch; a bulk bag holds every (possibly subsampled) cell of a
//! slide, gridded into patches that bound graph construction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::tsv::{CellTable, ExpressionFrame};

/// One supervised unit: spot or whole slide.
#[derive(Debug, Clone)]
pub struct Bag {
    pub unit_id: String,
    /// Row indices into the owning `CellTable`.
    pub members: Vec<usize>,
    /// Supervision target, absent at inference.
    pub target: Option<Vec<f64>>,
    /// Spot center in slide pixels; absent for bulk.
    pub unit_xy: Option<(f64, f64)>,
    /// Per-member patch id for bulk bags; `None` means one patch.
    pub patch_of: Option<Vec<usize>>,
}

impl Bag {
    pub fn n_cells(&self) -> usize {
        self.members.len()
    }
}

/// Assign each cell to every spot whose patch square contains it:
/// |x_i - x_s| <= patch_px/2 and |y_i - y_s| <= patch_px/2. Spots left
/// without cells are dropped; the count of dropped spots is returned.
pub fn assign_cells_to_spots(
    cells: &CellTable,
    spots: &ExpressionFrame,
    patch_px: f64,
) -> Result<(Vec<Bag>, usize)> {
    if patch_px <= 0.0 {
        return Err(Error::Contract(format!("patch_px {patch_px} must be positive")));
    }
    let centers = spots
        .unit_coords
        .as_ref()
        .ok_or_else(|| Error::Contract("spot assignment needs unit coordinates".into()))?;
    let half = patch_px / 2.0;
    let g = spots.n_genes();
    let mut bags = Vec::new();
    let mut dropped = 0usize;
    for (s, &(sx, sy)) in centers.iter().enumerate() {
        let members: Vec<usize> = cells
            .coords
            .iter()
            .enumerate()
            .filter(|(_, &(x, y))| (x - sx).abs() <= half && (y - sy).abs() <= half)
            .map(|(i, _)| i)
            .collect();
        if members.is_empty() {
            dropped += 1;
            continue;
        }
        let target = spots.values.data()[s * g..(s + 1) * g].to_vec();
        bags.push(Bag {
            unit_id: spots.unit_ids[s].clone(),
            members,
            target: Some(target),
            unit_xy: Some((sx, sy)),
            patch_of: None,
        });
    }
    if bags.is_empty() {
        return Err(Error::Dataset(format!(
            "no spot in sample {} received any cell",
            cells.sample_id
        )));
    }
    Ok((bags, dropped))
}

/// One bag covering the whole slide. Cells beyond `max_cells` are
/// dropped by a seeded uniform subsample; members are gridded into
/// `patch_px`-sized squares and labeled with compact patch ids.
pub fn grid_bulk_bags(
    cells: &CellTable,
    patch_px: f64,
    max_cells: usize,
    seed: u64,
) -> Result<Bag> {
    if patch_px <= 0.0 {
        return Err(Error::Contract(format!("patch_px {patch_px} must be positive")));
    }
    if max_cells == 0 {
        return Err(Error::Contract("max_cells must be positive".into()));
    }
    let n = cells.n_cells();
    if n == 0 {
        return Err(Error::Dataset(format!("sample {} has no cells", cells.sample_id)));
    }
    let mut members: Vec<usize> = if n > max_cells {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::index::sample(&mut rng, n, max_cells).into_vec()
    } else {
        (0..n).collect()
    };
    members.sort_unstable();
    // Grid squares keyed by (col, row); BTreeMap gives a stable id order.
    let mut square_ids = std::collections::BTreeMap::new();
    let mut keys = Vec::with_capacity(members.len());
    for &i in &members {
        let (x, y) = cells.coords[i];
        let key = ((x / patch_px) as i64, (y / patch_px) as i64);
        square_ids.entry(key).or_insert(0usize);
        keys.push(key);
    }
    for (next, (_, id)) in square_ids.iter_mut().enumerate() {
        *id = next;
    }
    let patch_of: Vec<usize> = keys.iter().map(|k| square_ids[k]).collect();
    Ok(Bag {
        unit_id: cells.sample_id.clone(),
        members,
        target: None,
        unit_xy: None,
        patch_of: Some(patch_of),
    })
}

/// A collection of bags over one or more cell tables, plus optional
/// per-cell phenotype labels (parallel to table rows).
#[derive(Debug, Clone)]
pub struct BagSet {
    pub tables: Vec<CellTable>,
    /// (table index, bag) pairs.
    pub bags: Vec<(usize, Bag)>,
    /// Per table: phenotype label per cell; empty until assigned.
    pub labels: Vec<Vec<usize>>,
}

impl BagSet {
    pub fn new(tables: Vec<CellTable>) -> Self {
        let labels = vec![Vec::new(); tables.len()];
        BagSet {
            tables,
            bags: Vec::new(),
            labels,
        }
    }

    pub fn push_bag(&mut self, table: usize, bag: Bag) -> Result<()> {
        let t = self
            .tables
            .get(table)
            .ok_or_else(|| Error::Contract(format!("table index {table} out of range")))?;
        if bag.members.is_empty() {
            return Err(Error::Dataset(format!("bag {} has no members", bag.unit_id)));
        }
        if let Some(&worst) = bag.members.iter().max() {
            if worst >= t.n_cells() {
                return Err(Error::Contract(format!(
                    "bag {} member {worst} beyond table of {} cells",
                    bag.unit_id,
                    t.n_cells()
                )));
            }
        }
        self.bags.push((table, bag));
        Ok(())
    }

    pub fn n_bags(&self) -> usize {
        self.bags.len()
    }

    pub fn bag(&self, i: usize) -> &Bag {
        &self.bags[i].1
    }

    pub fn bag_coords(&self, i: usize) -> Vec<(f64, f64)> {
        let (t, bag) = &self.bags[i];
        bag.members.iter().map(|&m| self.tables[*t].coords[m]).collect()
    }

    pub fn bag_features(&self, i: usize) -> Tensor {
        let (t, bag) = &self.bags[i];
        let table = &self.tables[*t];
        let w = table.feature_width();
        let mut data = Vec::with_capacity(bag.members.len() * w);
        for &m in &bag.members {
            data.extend_from_slice(&table.features.data()[m * w..(m + 1) * w]);
        }
        Tensor::new(vec![bag.members.len(), w], data).expect("member rows are uniform")
    }

    /// Labels for one bag's members; `None` until labels are assigned.
    pub fn bag_labels(&self, i: usize) -> Option<Vec<usize>> {
        let (t, bag) = &self.bags[i];
        let labels = &self.labels[*t];
        if labels.is_empty() {
            return None;
        }
        Some(bag.members.iter().map(|&m| labels[m]).collect())
    }

    /// All table rows stacked (training pool for PCA and clustering).
    pub fn pooled_features(&self) -> Result<Tensor> {
        let rows: Vec<&Tensor> = self.tables.iter().map(|t| &t.features).collect();
        if rows.is_empty() {
            return Err(Error::Dataset("bag set has no tables".into()));
        }
        let mut pooled = rows[0].clone();
        for t in &rows[1..] {
            pooled = pooled.concat(t, 0)?;
        }
        Ok(pooled)
    }

    /// Assign every table's cells to the nearest phenotype centroid.
    pub fn assign_labels(&mut self, model: &crate::cluster::PhenotypeModel) {
        for (t, table) in self.tables.iter().enumerate() {
            self.labels[t] = crate::cluster::assign(model, &table.features);
        }
    }

    /// Replace raw features with their PCA compression from the tree.
    pub fn compress(&mut self, tree: &crate::params::ParamTree) -> Result<()> {
        for table in &mut self.tables {
            table.features = crate::model::compress_features(tree, &table.features)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::tsv::Space;

    fn table(coords: Vec<(f64, f64)>) -> CellTable {
        let n = coords.len();
        let features =
            Tensor::new(vec![n, 2], (0..2 * n).map(|i| i as f64).collect()).unwrap();
        CellTable::new("s0".into(), (0..n as u64).collect(), coords, features).unwrap()
    }

    fn spot_frame(centers: Vec<(f64, f64)>) -> ExpressionFrame {
        let m = centers.len();
        ExpressionFrame::new(
            (0..m).map(|i| format!("u{i}")).collect(),
            Some(centers),
            Tensor::new(vec![m, 1], (0..m).map(|i| i as f64).collect()).unwrap(),
            vec!["A".into()],
            Space::RawCounts,
        )
        .unwrap()
    }

    #[test]
    fn cell_at_spot_center_is_assigned() {
        let cells = table(vec![(10.0, 10.0)]);
        let spots = spot_frame(vec![(10.0, 10.0)]);
        let (bags, dropped) = assign_cells_to_spots(&cells, &spots, 224.0).unwrap();
        assert_eq!(bags.len(), 1);
        assert_eq!(bags[0].members, vec![0]);
        assert_eq!(dropped, 0);
    }

    #[test]
    fn cell_outside_half_patch_is_not_assigned() {
        // dx = 190 > 112 = 224/2.
        let cells = table(vec![(200.0, 10.0), (10.0, 15.0)]);
        let spots = spot_frame(vec![(10.0, 10.0)]);
        let (bags, _) = assign_cells_to_spots(&cells, &spots, 224.0).unwrap();
        assert_eq!(bags[0].members, vec![1]);
    }

    #[test]
    fn empty_spots_dropped_and_counted() {
        let cells = table(vec![(10.0, 10.0)]);
        let spots = spot_frame(vec![(10.0, 10.0), (5000.0, 5000.0)]);
        let (bags, dropped) = assign_cells_to_spots(&cells, &spots, 224.0).unwrap();
        assert_eq!(bags.len(), 1);
        assert_eq!(dropped, 1);
    }

    #[test]
    fn all_spots_empty_is_an_error() {
        let cells = table(vec![(10.0, 10.0)]);
        let spots = spot_frame(vec![(9000.0, 9000.0)]);
        assert!(assign_cells_to_spots(&cells, &spots, 224.0).is_err());
    }

    #[test]
    fn membership_is_geometric_only() {
        let coords = vec![(10.0, 10.0), (50.0, 50.0), (300.0, 300.0)];
        let cells = table(coords.clone());
        let mut rev = coords.clone();
        rev.reverse();
        let cells_rev = table(rev);
        let spots = spot_frame(vec![(30.0, 30.0)]);
        let (a, _) = assign_cells_to_spots(&cells, &spots, 224.0).unwrap();
        let (b, _) = assign_cells_to_spots(&cells_rev, &spots, 224.0).unwrap();
        let set_a: std::collections::BTreeSet<(u64, u64)> = a[0]
            .members
            .iter()
            .map(|&i| key(cells.coords[i]))
            .collect();
        let set_b: std::collections::BTreeSet<(u64, u64)> = b[0]
            .members
            .iter()
            .map(|&i| key(cells_rev.coords[i]))
            .collect();
        assert_eq!(set_a, set_b);
    }

    fn key((x, y): (f64, f64)) -> (u64, u64) {
        (x.to_bits(), y.to_bits())
    }

    #[test]
    fn bulk_bag_keeps_small_slides_whole() {
        let cells = table(vec![(0.0, 0.0), (500.0, 0.0), (0.0, 500.0)]);
        let bag = grid_bulk_bags(&cells, 224.0, 1000, 0).unwrap();
        assert_eq!(bag.members, vec![0, 1, 2]);
        // Three distinct grid squares.
        assert_eq!(bag.patch_of.as_ref().unwrap().len(), 3);
        let distinct: std::collections::BTreeSet<_> =
            bag.patch_of.as_ref().unwrap().iter().collect();
        assert_eq!(distinct.len(), 3);
    }

    #[test]
    fn bulk_subsample_is_seeded_and_exact() {
        let coords: Vec<(f64, f64)> = (0..500)
            .map(|i| ((i % 50) as f64 * 10.0, (i / 50) as f64 * 10.0))
            .collect();
        let cells = table(coords);
        let a = grid_bulk_bags(&cells, 224.0, 200, 7).unwrap();
        let b = grid_bulk_bags(&cells, 224.0, 200, 7).unwrap();
        let c = grid_bulk_bags(&cells, 224.0, 200, 8).unwrap();
        assert_eq!(a.members.len(), 200);
        assert_eq!(a.members, b.members);
        assert_ne!(a.members, c.members);
    }

    #[test]
    fn empty_slide_is_an_error() {
        let cells = CellTable::new("s".into(), vec![], vec![], Tensor::zeros(&[0, 2])).unwrap();
        assert!(grid_bulk_bags(&cells, 224.0, 10, 0).is_err());
    }

    #[test]
    fn bag_set_gathers_member_rows() {
        let cells = table(vec![(0.0, 0.0), (1.0, 1.0), (2.0, 2.0)]);
        let mut set = BagSet::new(vec![cells]);
        set.push_bag(
            0,
            Bag {
                unit_id: "u".into(),
                members: vec![2, 0],
                target: Some(vec![1.0]),
                unit_xy: None,
                patch_of: None,
            },
        )
        .unwrap();
        let f = set.bag_features(0);
        assert_eq!(f.data(), &[4.0, 5.0, 0.0, 1.0]);
        assert_eq!(set.bag_coords(0), vec![(2.0, 2.0), (0.0, 0.0)]);
        assert!(set.bag_labels(0).is_none());
        set.labels[0] = vec![3, 4, 5];
        assert_eq!(set.bag_labels(0).unwrap(), vec![5, 3]);
    }

    #[test]
    fn out_of_range_member_rejected() {
        let cells = table(vec![(0.0, 0.0)]);
        let mut set = BagSet::new(vec![cells]);
        let err = set
            .push_bag(
                0,
                Bag {
                    unit_id: "u".into(),
                    members: vec![5],
                    target: None,
                    unit_xy: None,
                    patch_of: None,
                },
            )
            .unwrap_err();
        assert!(err.to_string().contains("beyond table"));
    }
}
