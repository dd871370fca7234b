//! Tabular CSV ingestion and the unit-range normalization fitted on the
//! training split only: every feature column is affinely mapped so its
//! train-split min/max land on -1/+1 (constant columns map to 0).

use super::{Dataset, TaskKind, Targets};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub fn load_tabular_csv(path: &Path, label_column: &str, kind: TaskKind) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty CSV", path.display())))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    let label_idx = columns
        .iter()
        .position(|&c| c == label_column)
        .ok_or_else(|| Error::Data(format!("label column '{label_column}' not in header")))?;

    let n_features = columns.len() - 1;
    let mut features: Vec<f64> = Vec::new();
    let mut labels: Vec<f64> = Vec::new();
    for (line_no, line) in lines {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != columns.len() {
            return Err(Error::Data(format!(
                "row {}: {} cells, expected {}",
                line_no + 1,
                cells.len(),
                columns.len()
            )));
        }
        for (col, cell) in cells.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                Error::Data(format!(
                    "row {}, column '{}': non-numeric cell '{}'",
                    line_no + 1,
                    columns[col],
                    cell
                ))
            })?;
            if col == label_idx {
                labels.push(v);
            } else {
                features.push(v);
            }
        }
    }
    let rows = labels.len();
    let x = Tensor::new(rows, n_features, features);
    let targets = match kind {
        TaskKind::Regression => Targets::Values(labels),
        TaskKind::Classification => {
            let classes: Vec<usize> = labels
                .iter()
                .map(|&v| {
                    if v >= 0.0 && v.fract() == 0.0 {
                        Ok(v as usize)
                    } else {
                        Err(Error::Data(format!("label {v} is not a class index")))
                    }
                })
                .collect::<Result<_>>()?;
            Targets::Classes(classes)
        }
    };
    let class_count = match &targets {
        Targets::Classes(c) => c.iter().max().map_or(0, |&m| m + 1),
        Targets::Values(_) => 0,
    };
    let ds = Dataset { x, targets, class_count, provenance: path.display().to_string() };
    ds.validate()?;
    Ok(ds)
}

/// Per-column affine maps from the raw range onto [-1, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationMap {
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
}

impl NormalizationMap {
    /// Fit on the training rows only, then rescale every row of the dataset.
    pub fn fit_and_apply(ds: &mut Dataset, train_rows: &[usize]) -> Result<NormalizationMap> {
        if train_rows.is_empty() {
            return Err(Error::Data("cannot fit normalization on an empty train split".into()));
        }
        let d = ds.dims();
        let mut mins = vec![f64::INFINITY; d];
        let mut maxs = vec![f64::NEG_INFINITY; d];
        for &r in train_rows {
            for c in 0..d {
                let v = ds.x.at(r, c);
                mins[c] = mins[c].min(v);
                maxs[c] = maxs[c].max(v);
            }
        }
        let map = NormalizationMap { mins, maxs };
        for r in 0..ds.rows() {
            for c in 0..d {
                *ds.x.at_mut(r, c) = map.forward(c, ds.x.at(r, c));
            }
        }
        ds.provenance = format!("{} (unit-range normalized)", ds.provenance);
        Ok(map)
    }

    pub fn forward(&self, col: usize, v: f64) -> f64 {
        let (lo, hi) = (self.mins[col], self.maxs[col]);
        if hi == lo {
            0.0
        } else {
            2.0 * (v - lo) / (hi - lo) - 1.0
        }
    }

    pub fn inverse(&self, col: usize, v: f64) -> f64 {
        let (lo, hi) = (self.mins[col], self.maxs[col]);
        if hi == lo {
            lo
        } else {
            lo + (v + 1.0) * (hi - lo) / 2.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;
    use tempfile::NamedTempFile;

    fn write_csv(content: &str) -> NamedTempFile {
        let mut f = NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_and_normalizes() {
        let f = write_csv("a,b,label\n0,5,0\n10,5,1\n5,5,0\n");
        let mut ds = load_tabular_csv(f.path(), "label", TaskKind::Classification).unwrap();
        assert_eq!(ds.rows(), 3);
        assert_eq!(ds.dims(), 2);
        let map = NormalizationMap::fit_and_apply(&mut ds, &[0, 1, 2]).unwrap();
        // column with range {0,10} maps to {-1,+1}
        assert_eq!(ds.x.at(0, 0), -1.0);
        assert_eq!(ds.x.at(1, 0), 1.0);
        assert_eq!(ds.x.at(2, 0), 0.0);
        // constant column maps to 0
        assert!(ds.x.data.iter().skip(1).step_by(2).all(|&v| v == 0.0));
        // round trip
        for (col, raw) in [(0usize, 7.3), (1, 5.0)] {
            let there = map.forward(col, raw);
            let back = map.inverse(col, there);
            assert!((back - raw).abs() < 1e-12);
        }
    }

    #[test]
    fn train_only_fit_differs_when_test_extends_range() {
        let f = write_csv("a,label\n0,0\n1,0\n4,1\n");
        let mut ds1 = load_tabular_csv(f.path(), "label", TaskKind::Classification).unwrap();
        let mut ds2 = ds1.clone();
        let train_only = NormalizationMap::fit_and_apply(&mut ds1, &[0, 1]).unwrap();
        let leaky = NormalizationMap::fit_and_apply(&mut ds2, &[0, 1, 2]).unwrap();
        assert_ne!(train_only.maxs[0], leaky.maxs[0]);
    }

    #[test]
    fn non_numeric_cell_names_row_and_column() {
        let f = write_csv("a,label\n1,0\nxyz,1\n");
        let err = load_tabular_csv(f.path(), "label", TaskKind::Classification).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 3") && msg.contains("'a'"), "{msg}");
    }

    #[test]
    fn missing_label_column_is_an_error() {
        let f = write_csv("a,b\n1,2\n");
        assert!(load_tabular_csv(f.path(), "label", TaskKind::Classification).is_err());
    }
}
