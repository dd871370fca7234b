//! Collage datasets for the shortcut-learning experiments: each row
//! concatenates one tile from each of two source datasets. The training set
//! is ambiguous (both tiles share the row label); the two test sets make one
//! tile predictive and randomize the other.

use super::{Dataset, Targets};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CollageMode {
    /// Both tiles drawn from the row's class.
    AmbiguousTrain,
    /// Tile A keeps the label; tile B drawn from a uniformly random class.
    TestA,
    /// Tile B keeps the label; tile A drawn from a uniformly random class.
    TestB,
}

fn rows_by_class(ds: &Dataset) -> Result<Vec<Vec<usize>>> {
    let classes = match &ds.targets {
        Targets::Classes(c) => c,
        Targets::Values(_) => {
            return Err(Error::Data("collage sources must be classification datasets".into()))
        }
    };
    let mut by_class = vec![Vec::new(); ds.class_count];
    for (row, &c) in classes.iter().enumerate() {
        by_class[c].push(row);
    }
    if let Some(empty) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::Data(format!("collage source has no rows for class {empty}")));
    }
    Ok(by_class)
}

pub fn make_collage(
    ds_a: &Dataset,
    ds_b: &Dataset,
    mode: CollageMode,
    n_rows: usize,
    seed: u64,
) -> Result<Dataset> {
    if ds_a.class_count != ds_b.class_count {
        return Err(Error::Data(format!(
            "collage sources disagree on class count: {} vs {}",
            ds_a.class_count, ds_b.class_count
        )));
    }
    let k = ds_a.class_count;
    let by_a = rows_by_class(ds_a)?;
    let by_b = rows_by_class(ds_b)?;
    let (da, db) = (ds_a.dims(), ds_b.dims());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut x = Tensor::zeros(n_rows, da + db);
    let mut labels = Vec::with_capacity(n_rows);
    for r in 0..n_rows {
        let label = rng.gen_range(0..k);
        let (class_a, class_b) = match mode {
            CollageMode::AmbiguousTrain => (label, label),
            CollageMode::TestA => (label, rng.gen_range(0..k)),
            CollageMode::TestB => (rng.gen_range(0..k), label),
        };
        let row_a = by_a[class_a][rng.gen_range(0..by_a[class_a].len())];
        let row_b = by_b[class_b][rng.gen_range(0..by_b[class_b].len())];
        x.data[r * (da + db)..r * (da + db) + da]
            .copy_from_slice(&ds_a.x.data[row_a * da..(row_a + 1) * da]);
        x.data[r * (da + db) + da..(r + 1) * (da + db)]
            .copy_from_slice(&ds_b.x.data[row_b * db..(row_b + 1) * db]);
        labels.push(label);
    }

    Ok(Dataset {
        x,
        targets: Targets::Classes(labels),
        class_count: k,
        provenance: format!("collage[{:?}]({}, {})", mode, ds_a.provenance, ds_b.provenance),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two tiny sources whose tiles literally encode their class, so oracle
    /// classifiers over single tiles are exact.
    fn source(dim_offset: f64, k: usize, per_class: usize) -> Dataset {
        let rows = k * per_class;
        let mut x = Tensor::zeros(rows, 1);
        let mut classes = Vec::new();
        for c in 0..k {
            for i in 0..per_class {
                x.data[c * per_class + i] = c as f64 + dim_offset;
                classes.push(c);
            }
        }
        Dataset { x, targets: Targets::Classes(classes), class_count: k, provenance: "toy".into() }
    }

    #[test]
    fn ambiguous_train_makes_both_tiles_predictive() {
        let a = source(0.0, 2, 4);
        let b = source(100.0, 2, 4);
        let c = make_collage(&a, &b, CollageMode::AmbiguousTrain, 64, 9).unwrap();
        match &c.targets {
            Targets::Classes(labels) => {
                for r in 0..c.rows() {
                    let tile_a_class = c.x.at(r, 0) as usize;
                    let tile_b_class = (c.x.at(r, 1) - 100.0) as usize;
                    assert_eq!(tile_a_class, labels[r]);
                    assert_eq!(tile_b_class, labels[r]);
                }
            }
            _ => panic!(),
        }
    }

    #[test]
    fn test_a_randomizes_tile_b() {
        let a = source(0.0, 2, 4);
        let b = source(100.0, 2, 4);
        let c = make_collage(&a, &b, CollageMode::TestA, 2000, 10).unwrap();
        let labels = match &c.targets {
            Targets::Classes(l) => l,
            _ => panic!(),
        };
        // a perfect tile-A classifier is perfect on testA
        let acc_a = (0..c.rows())
            .filter(|&r| c.x.at(r, 0) as usize == labels[r])
            .count() as f64
            / c.rows() as f64;
        assert_eq!(acc_a, 1.0);
        // a perfect tile-B classifier scores about 1/class_count
        let acc_b = (0..c.rows())
            .filter(|&r| (c.x.at(r, 1) - 100.0) as usize == labels[r])
            .count() as f64
            / c.rows() as f64;
        assert!((acc_b - 0.5).abs() < 0.06, "tile-B accuracy {acc_b} not near chance");
    }

    #[test]
    fn single_class_tile_b_is_degenerate_but_valid() {
        let a = source(0.0, 1, 4);
        let b = source(100.0, 1, 4);
        let c = make_collage(&a, &b, CollageMode::TestA, 8, 11).unwrap();
        assert_eq!(c.rows(), 8);
    }

    #[test]
    fn class_count_mismatch_rejected() {
        let a = source(0.0, 2, 4);
        let b = source(100.0, 3, 4);
        assert!(make_collage(&a, &b, CollageMode::AmbiguousTrain, 8, 1).is_err());
    }
}
