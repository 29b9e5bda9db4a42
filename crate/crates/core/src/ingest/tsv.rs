//! Tab-separated tables for cells, expression units, and normalization
//! stats. All writers emit shortest round-trip float strings, so a file
//! written twice from the same values is byte-identical.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which space expression values currently live in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Space {
    RawCounts,
    Log1p,
    Zscore,
}

impl Space {
    pub fn tag(self) -> &'static str {
        match self {
            Space::RawCounts => "raw_counts",
            Space::Log1p => "log1p",
            Space::Zscore => "zscore",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "raw_counts" => Ok(Space::RawCounts),
            "log1p" => Ok(Space::Log1p),
            "zscore" => Ok(Space::Zscore),
            other => Err(Error::Parse(format!("unknown expression space {other:?}"))),
        }
    }
}

/// Per-sample cell table: ids, slide coordinates in pixels, and one
/// feature row per cell (raw F-wide or compressed D-wide).
#[derive(Debug, Clone)]
pub struct CellTable {
    pub sample_id: String,
    pub cell_ids: Vec<u64>,
    pub coords: Vec<(f64, f64)>,
    pub features: Tensor,
}

impl CellTable {
    pub fn new(
        sample_id: String,
        cell_ids: Vec<u64>,
        coords: Vec<(f64, f64)>,
        features: Tensor,
    ) -> Result<Self> {
        let (n, _) = features.dims2()?;
        if cell_ids.len() != n || coords.len() != n {
            return Err(Error::Dimension(format!(
                "cell table rows disagree: {} ids, {} coords, {} feature rows",
                cell_ids.len(),
                coords.len(),
                n
            )));
        }
        let mut seen = std::collections::HashSet::with_capacity(n);
        for &id in &cell_ids {
            if !seen.insert(id) {
                return Err(Error::Dataset(format!(
                    "duplicate cell_id {id} in sample {sample_id}"
                )));
            }
        }
        for &(x, y) in &coords {
            if !x.is_finite() || !y.is_finite() || x < 0.0 || y < 0.0 {
                return Err(Error::Dataset(format!(
                    "cell coordinate ({x}, {y}) in sample {sample_id} must be finite and non-negative"
                )));
            }
        }
        Ok(CellTable {
            sample_id,
            cell_ids,
            coords,
            features,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.cell_ids.len()
    }

    pub fn feature_width(&self) -> usize {
        self.features.shape()[1]
    }
}

/// Expression matrix for spots (with coordinates) or bulk samples
/// (without). One row per supervised unit.
#[derive(Debug, Clone)]
pub struct ExpressionFrame {
    pub unit_ids: Vec<String>,
    pub unit_coords: Option<Vec<(f64, f64)>>,
    pub values: Tensor,
    pub gene_names: Vec<String>,
    pub space: Space,
}

impl ExpressionFrame {
    pub fn new(
        unit_ids: Vec<String>,
        unit_coords: Option<Vec<(f64, f64)>>,
        values: Tensor,
        gene_names: Vec<String>,
        space: Space,
    ) -> Result<Self> {
        let (m, g) = values.dims2()?;
        if m == 0 {
            return Err(Error::Dataset("expression frame has no units".into()));
        }
        if unit_ids.len() != m {
            return Err(Error::Dimension(format!(
                "{} unit ids for {} expression rows",
                unit_ids.len(),
                m
            )));
        }
        if let Some(c) = &unit_coords {
            if c.len() != m {
                return Err(Error::Dimension(format!(
                    "{} unit coords for {} expression rows",
                    c.len(),
                    m
                )));
            }
        }
        if gene_names.len() != g {
            return Err(Error::Dimension(format!(
                "{} gene names for {} expression columns",
                gene_names.len(),
                g
            )));
        }
        let mut seen = std::collections::HashSet::with_capacity(g);
        for name in &gene_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::Dataset(format!("duplicate gene name {name:?}")));
            }
        }
        if space == Space::RawCounts {
            for &v in values.data() {
                if !(v >= 0.0) {
                    return Err(Error::Dataset(format!(
                        "raw count {v} is negative or NaN"
                    )));
                }
            }
        }
        Ok(ExpressionFrame {
            unit_ids,
            unit_coords,
            values,
            gene_names,
            space,
        })
    }

    pub fn n_units(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn n_genes(&self) -> usize {
        self.gene_names.len()
    }

    /// New frame keeping only the named genes, in the given order.
    pub fn select_genes(&self, genes: &[String]) -> Result<ExpressionFrame> {
        let mut cols = Vec::with_capacity(genes.len());
        for name in genes {
            let j = self
                .gene_names
                .iter()
                .position(|g| g == name)
                .ok_or_else(|| Error::Dataset(format!("gene {name:?} absent from frame")))?;
            cols.push(j);
        }
        let m = self.n_units();
        let g_old = self.n_genes();
        let mut data = Vec::with_capacity(m * cols.len());
        for i in 0..m {
            for &j in &cols {
                data.push(self.values.data()[i * g_old + j]);
            }
        }
        ExpressionFrame::new(
            self.unit_ids.clone(),
            self.unit_coords.clone(),
            Tensor::new(vec![m, cols.len()], data)?,
            genes.to_vec(),
            self.space,
        )
    }
}

fn parse_f64(field: &str, path: &Path, line: usize) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| {
        Error::Parse(format!(
            "{}:{line}: expected a number, got {field:?}",
            path.display()
        ))
    })
}

/// Read `cells.tsv`: header `cell_id\tx\ty\tf0...`, one row per cell.
pub fn read_cells(path: &Path, sample_id: &str) -> Result<CellTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse(format!("{}: empty file", path.display())))?
        .map_err(|e| Error::io(path, e))?;
    let cols: Vec<&str> = header.trim_end().split('\t').collect();
    if cols.len() < 4 || cols[0] != "cell_id" || cols[1] != "x" || cols[2] != "y" {
        return Err(Error::Parse(format!(
            "{}: header must start with cell_id\\tx\\ty\\tf0...",
            path.display()
        )));
    }
    let width = cols.len() - 3;
    let mut cell_ids = Vec::new();
    let mut coords = Vec::new();
    let mut data = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = lineno + 2;
        let fields: Vec<&str> = line.trim_end().split('\t').collect();
        if fields.len() != cols.len() {
            return Err(Error::Parse(format!(
                "{}:{lineno}: {} fields, header has {}",
                path.display(),
                fields.len(),
                cols.len()
            )));
        }
        let id = fields[0].trim().parse::<u64>().map_err(|_| {
            Error::Parse(format!(
                "{}:{lineno}: cell_id must be an integer, got {:?}",
                path.display(),
                fields[0]
            ))
        })?;
        cell_ids.push(id);
        coords.push((
            parse_f64(fields[1], path, lineno)?,
            parse_f64(fields[2], path, lineno)?,
        ));
        for f in &fields[3..] {
            data.push(parse_f64(f, path, lineno)?);
        }
    }
    let n = cell_ids.len();
    CellTable::new(
        sample_id.to_string(),
        cell_ids,
        coords,
        Tensor::new(vec![n, width], data)?,
    )
}

pub fn write_cells(path: &Path, table: &CellTable) -> Result<()> {
    let mut out = String::new();
    out.push_str("cell_id\tx\ty");
    for j in 0..table.feature_width() {
        let _ = write!(out, "\tf{j}");
    }
    out.push('\n');
    let width = table.feature_width();
    for i in 0..table.n_cells() {
        let (x, y) = table.coords[i];
        let _ = write!(out, "{}\t{x}\t{y}", table.cell_ids[i]);
        for j in 0..width {
            let _ = write!(out, "\t{}", table.features.data()[i * width + j]);
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Read `expr.tsv`: header `unit_id\tx\ty\tg_<name>...`; empty x/y on
/// every row means bulk (no unit coordinates).
pub fn read_expr(path: &Path, space: Space) -> Result<ExpressionFrame> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse(format!("{}: empty file", path.display())))?
        .map_err(|e| Error::io(path, e))?;
    let cols: Vec<&str> = header.trim_end().split('\t').collect();
    if cols.len() < 4 || cols[0] != "unit_id" || cols[1] != "x" || cols[2] != "y" {
        return Err(Error::Parse(format!(
            "{}: header must start with unit_id\\tx\\ty\\tg_<name>...",
            path.display()
        )));
    }
    let mut gene_names = Vec::with_capacity(cols.len() - 3);
    for c in &cols[3..] {
        let name = c.strip_prefix("g_").ok_or_else(|| {
            Error::Parse(format!(
                "{}: expression column {c:?} must be named g_<gene>",
                path.display()
            ))
        })?;
        gene_names.push(name.to_string());
    }
    let g = gene_names.len();
    let mut unit_ids = Vec::new();
    let mut coords: Vec<(f64, f64)> = Vec::new();
    let mut any_coord = false;
    let mut missing_coord = false;
    let mut data = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = lineno + 2;
        let fields: Vec<&str> = line.trim_end().split('\t').collect();
        if fields.len() != cols.len() {
            return Err(Error::Parse(format!(
                "{}:{lineno}: {} fields, header has {}",
                path.display(),
                fields.len(),
                cols.len()
            )));
        }
        unit_ids.push(fields[0].trim().to_string());
        let (xs, ys) = (fields[1].trim(), fields[2].trim());
        match (xs.is_empty(), ys.is_empty()) {
            (true, true) => {
                missing_coord = true;
                coords.push((0.0, 0.0));
            }
            (false, false) => {
                any_coord = true;
                coords.push((
                    parse_f64(xs, path, lineno)?,
                    parse_f64(ys, path, lineno)?,
                ));
            }
            _ => {
                return Err(Error::Parse(format!(
                    "{}:{lineno}: unit has only one of x/y",
                    path.display()
                )))
            }
        }
        for f in &fields[3..] {
            data.push(parse_f64(f, path, lineno)?);
        }
    }
    if any_coord && missing_coord {
        return Err(Error::Parse(format!(
            "{}: mixes units with and without coordinates",
            path.display()
        )));
    }
    let m = unit_ids.len();
    ExpressionFrame::new(
        unit_ids,
        if any_coord { Some(coords) } else { None },
        Tensor::new(vec![m, g], data)?,
        gene_names,
        space,
    )
}

pub fn write_expr(path: &Path, frame: &ExpressionFrame) -> Result<()> {
    let mut out = String::new();
    out.push_str("unit_id\tx\ty");
    for g in &frame.gene_names {
        let _ = write!(out, "\tg_{g}");
    }
    out.push('\n');
    let g = frame.n_genes();
    for i in 0..frame.n_units() {
        out.push_str(&frame.unit_ids[i]);
        match &frame.unit_coords {
            Some(c) => {
                let _ = write!(out, "\t{}\t{}", c[i].0, c[i].1);
            }
            None => out.push_str("\t\t"),
        }
        for j in 0..g {
            let _ = write!(out, "\t{}", frame.values.data()[i * g + j]);
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Read `norm_stats.tsv` (`gene\tmu\tsigma`) in file order.
pub fn read_norm_stats(path: &Path) -> Result<(Vec<String>, crate::params::NormStats)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse(format!("{}: empty file", path.display())))?
        .map_err(|e| Error::io(path, e))?;
    if header.trim_end() != "gene\tmu\tsigma" {
        return Err(Error::Parse(format!(
            "{}: header must be gene\\tmu\\tsigma",
            path.display()
        )));
    }
    let mut genes = Vec::new();
    let mut mu = Vec::new();
    let mut sigma = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = lineno + 2;
        let fields: Vec<&str> = line.trim_end().split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse(format!(
                "{}:{lineno}: expected 3 fields",
                path.display()
            )));
        }
        genes.push(fields[0].to_string());
        mu.push(parse_f64(fields[1], path, lineno)?);
        let s = parse_f64(fields[2], path, lineno)?;
        if s < 0.0 {
            return Err(Error::Parse(format!(
                "{}:{lineno}: sigma must be non-negative",
                path.display()
            )));
        }
        sigma.push(s);
    }
    Ok((genes, crate::params::NormStats { mu, sigma }))
}

pub fn write_norm_stats(
    path: &Path,
    genes: &[String],
    stats: &crate::params::NormStats,
) -> Result<()> {
    if genes.len() != stats.mu.len() || genes.len() != stats.sigma.len() {
        return Err(Error::Dimension(format!(
            "{} genes, {} mu, {} sigma",
            genes.len(),
            stats.mu.len(),
            stats.sigma.len()
        )));
    }
    let mut out = String::from("gene\tmu\tsigma\n");
    for i in 0..genes.len() {
        let _ = writeln!(out, "{}\t{}\t{}", genes[i], stats.mu[i], stats.sigma[i]);
    }
    write_atomic(path, out.as_bytes())
}

/// Write via a sibling temp file and rename, so readers never see a
/// half-written table.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn cells_round_trip() {
        let dir = tmpdir();
        let path = dir.path().join("cells.tsv");
        let table = CellTable::new(
            "s0".into(),
            vec![7, 3],
            vec![(1.5, 2.25), (0.0, 10.0)],
            Tensor::new(vec![2, 3], vec![0.1, -0.2, 0.3, 1.0, 2.0, 3.0]).unwrap(),
        )
        .unwrap();
        write_cells(&path, &table).unwrap();
        let back = read_cells(&path, "s0").unwrap();
        assert_eq!(back.cell_ids, table.cell_ids);
        assert_eq!(back.coords, table.coords);
        assert_eq!(back.features.data(), table.features.data());
    }

    #[test]
    fn cells_writer_is_byte_deterministic() {
        let dir = tmpdir();
        let a = dir.path().join("a.tsv");
        let b = dir.path().join("b.tsv");
        let table = CellTable::new(
            "s0".into(),
            vec![0, 1],
            vec![(0.1, 0.2), (0.3, 0.4)],
            Tensor::new(vec![2, 2], vec![1.0 / 3.0, 0.7, -1e-9, 5e300]).unwrap(),
        )
        .unwrap();
        write_cells(&a, &table).unwrap();
        write_cells(&b, &table).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn duplicate_cell_ids_rejected() {
        let err = CellTable::new(
            "s0".into(),
            vec![1, 1],
            vec![(0.0, 0.0), (1.0, 1.0)],
            Tensor::zeros(&[2, 2]),
        )
        .unwrap_err();
        assert!(err.to_string().contains("duplicate cell_id"));
    }

    #[test]
    fn negative_coordinates_rejected() {
        let err = CellTable::new(
            "s0".into(),
            vec![0],
            vec![(-1.0, 0.0)],
            Tensor::zeros(&[1, 2]),
        )
        .unwrap_err();
        assert!(err.to_string().contains("non-negative"));
    }

    #[test]
    fn expr_round_trip_spot() {
        let dir = tmpdir();
        let path = dir.path().join("expr.tsv");
        let frame = ExpressionFrame::new(
            vec!["u0".into(), "u1".into()],
            Some(vec![(10.0, 20.0), (30.0, 40.0)]),
            Tensor::new(vec![2, 2], vec![1.0, 0.0, 2.5, 3.0]).unwrap(),
            vec!["ACTB".into(), "GAPDH".into()],
            Space::RawCounts,
        )
        .unwrap();
        write_expr(&path, &frame).unwrap();
        let back = read_expr(&path, Space::RawCounts).unwrap();
        assert_eq!(back.unit_ids, frame.unit_ids);
        assert_eq!(back.unit_coords, frame.unit_coords);
        assert_eq!(back.gene_names, frame.gene_names);
        assert_eq!(back.values.data(), frame.values.data());
    }

    #[test]
    fn expr_round_trip_bulk() {
        let dir = tmpdir();
        let path = dir.path().join("expr.tsv");
        let frame = ExpressionFrame::new(
            vec!["slide0".into()],
            None,
            Tensor::new(vec![1, 2], vec![100.0, 3.0]).unwrap(),
            vec!["A".into(), "B".into()],
            Space::RawCounts,
        )
        .unwrap();
        write_expr(&path, &frame).unwrap();
        let back = read_expr(&path, Space::RawCounts).unwrap();
        assert!(back.unit_coords.is_none());
        assert_eq!(back.values.data(), frame.values.data());
    }

    #[test]
    fn expr_mixed_coords_rejected() {
        let dir = tmpdir();
        let path = dir.path().join("expr.tsv");
        std::fs::write(
            &path,
            "unit_id\tx\ty\tg_A\nu0\t1\t2\t3\nu1\t\t\t4\n",
        )
        .unwrap();
        let err = read_expr(&path, Space::RawCounts).unwrap_err();
        assert!(err.to_string().contains("mixes units"));
    }

    #[test]
    fn expr_negative_count_rejected() {
        let frame = ExpressionFrame::new(
            vec!["u0".into()],
            None,
            Tensor::new(vec![1, 1], vec![-2.0]).unwrap(),
            vec!["A".into()],
            Space::RawCounts,
        );
        assert!(frame.is_err());
    }

    #[test]
    fn select_genes_reorders_columns() {
        let frame = ExpressionFrame::new(
            vec!["u0".into()],
            None,
            Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap(),
            vec!["A".into(), "B".into(), "C".into()],
            Space::Log1p,
        )
        .unwrap();
        let sub = frame.select_genes(&["C".into(), "A".into()]).unwrap();
        assert_eq!(sub.values.data(), &[3.0, 1.0]);
        assert!(frame.select_genes(&["Z".into()]).is_err());
    }

    #[test]
    fn norm_stats_round_trip() {
        let dir = tmpdir();
        let path = dir.path().join("norm_stats.tsv");
        let genes = vec!["A".into(), "B".into()];
        let stats = crate::params::NormStats {
            mu: vec![0.5, 1.5],
            sigma: vec![1.0, 0.25],
        };
        write_norm_stats(&path, &genes, &stats).unwrap();
        let (g2, s2) = read_norm_stats(&path).unwrap();
        assert_eq!(g2, genes);
        assert_eq!(s2, stats);
    }

    #[test]
    fn parse_error_names_line() {
        let dir = tmpdir();
        let path = dir.path().join("cells.tsv");
        std::fs::write(&path, "cell_id\tx\ty\tf0\n0\t1\toops\t2\n").unwrap();
        let err = read_cells(&path, "s").unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
    }
}
