//! Dataset construction and loading: algorithmic operation tables, collage
//! shortcut-learning sets, tabular CSVs with unit-range normalization, IDX
//! image files with cropping, synthetic stand-ins, and train/val/test splits.

mod algorithmic;
mod collage;
mod idx;
mod synth;
mod tabular;

pub use algorithmic::{gen_algorithmic, AlgExpr, AlgTaskSpec, GroupExpr, PermGroup};
pub use collage::{make_collage, CollageMode};
pub use idx::{load_idx_images, write_idx_images, write_idx_labels, CropSpec};
pub use synth::{gen_abs_regression, gen_staircase, gen_synth_digit_images, gen_two_blobs};
pub use tabular::{load_tabular_csv, NormalizationMap};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

/// An in-memory dataset: a feature matrix plus class or scalar targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Tensor,
    pub targets: Targets,
    /// Number of classes; retained for regression tasks built from class IDs
    /// so predictions can be snapped back to the nearest class anchor.
    pub class_count: usize,
    pub provenance: String,
}

impl Dataset {
    pub fn rows(&self) -> usize {
        self.x.rows
    }

    pub fn dims(&self) -> usize {
        self.x.cols
    }

    pub fn kind(&self) -> TaskKind {
        match self.targets {
            Targets::Classes(_) => TaskKind::Classification,
            Targets::Values(_) => TaskKind::Regression,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = match &self.targets {
            Targets::Classes(c) => {
                if let Some(&bad) = c.iter().find(|&&c| c >= self.class_count) {
                    return Err(Error::Data(format!(
                        "class index {bad} out of range for {} classes",
                        self.class_count
                    )));
                }
                c.len()
            }
            Targets::Values(v) => v.len(),
        };
        if n != self.x.rows {
            return Err(Error::Data(format!("{} targets for {} rows", n, self.x.rows)));
        }
        Ok(())
    }

    pub fn class_of(&self, row: usize) -> Option<usize> {
        match &self.targets {
            Targets::Classes(c) => Some(c[row]),
            Targets::Values(_) => None,
        }
    }

    pub fn value_of(&self, row: usize) -> f64 {
        match &self.targets {
            Targets::Classes(c) => c[row] as f64,
            Targets::Values(v) => v[row],
        }
    }

    /// Gather a row subset into a new feature matrix.
    pub fn gather_x(&self, idx: &[usize]) -> Tensor {
        let d = self.dims();
        let mut out = Tensor::zeros(idx.len(), d);
        for (r, &i) in idx.iter().enumerate() {
            out.data[r * d..(r + 1) * d].copy_from_slice(&self.x.data[i * d..(i + 1) * d]);
        }
        out
    }

    /// Turn this classification dataset into the matching regression task:
    /// class IDs become scalar targets spread regularly over [-1, 1].
    pub fn to_class_regression(&self) -> Result<Dataset> {
        let classes = match &self.targets {
            Targets::Classes(c) => c,
            Targets::Values(_) => {
                return Err(Error::Data("dataset is already a regression task".into()))
            }
        };
        let anchors = regression_targets_for(self.class_count)?;
        let values = classes.iter().map(|&c| anchors[c]).collect();
        Ok(Dataset {
            x: self.x.clone(),
            targets: Targets::Values(values),
            class_count: self.class_count,
            provenance: format!("{} (class-id regression)", self.provenance),
        })
    }

    /// Class anchor values for regression-from-classes tasks.
    pub fn anchors(&self) -> Option<Vec<f64>> {
        if self.class_count >= 2 {
            regression_targets_for(self.class_count).ok()
        } else {
            None
        }
    }
}

/// Scalar regression targets for class IDs: class i maps to -1 + 2i/(C-1).
pub fn regression_targets_for(class_count: usize) -> Result<Vec<f64>> {
    if class_count < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {class_count}")));
    }
    Ok((0..class_count)
        .map(|i| -1.0 + 2.0 * i as f64 / (class_count - 1) as f64)
        .collect())
}

pub fn regression_targets(classes: &[usize], class_count: usize) -> Result<Vec<f64>> {
    let anchors = regression_targets_for(class_count)?;
    classes
        .iter()
        .map(|&c| {
            anchors
                .get(c)
                .copied()
                .ok_or_else(|| Error::Data(format!("class {c} out of range")))
        })
        .collect()
}

/// Disjoint train/val/test row indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self, rows: usize) -> Result<()> {
        let mut seen = vec![false; rows];
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= rows {
                return Err(Error::Data(format!("split index {i} out of range for {rows} rows")));
            }
            if seen[i] {
                return Err(Error::Data(format!("split index {i} appears twice")));
            }
            seen[i] = true;
        }
        Ok(())
    }
}

/// Shuffle rows with the seed and split `fraction` of them into train, the
/// rest into test. Validation starts empty; see [`SplitSpec`] helpers.
pub fn split(rows: usize, fraction: f64, seed: u64) -> Result<SplitSpec> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction must be in (0,1), got {fraction}")));
    }
    let mut idx: Vec<usize> = (0..rows).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_train = ((rows as f64) * fraction).round() as usize;
    let train = idx[..n_train].to_vec();
    let test = idx[n_train..].to_vec();
    Ok(SplitSpec { train, val: Vec::new(), test, fraction, seed })
}

impl SplitSpec {
    /// Hold out a validation set from the training indices, of the same size
    /// as the test set (or the training remainder if smaller).
    pub fn with_validation_like_test(mut self) -> Self {
        let n = self.test.len().min(self.train.len().saturating_sub(1));
        let at = self.train.len() - n;
        self.val = self.train.split_off(at);
        self
    }

    /// Hold out `n` validation rows from the training indices.
    pub fn with_validation_rows(mut self, n: usize) -> Self {
        let n = n.min(self.train.len().saturating_sub(1));
        let at = self.train.len() - n;
        self.val = self.train.split_off(at);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn regression_anchor_examples() {
        let a = regression_targets_for(10).unwrap();
        assert_eq!(a[0], -1.0);
        assert_eq!(a[9], 1.0);
        assert_eq!(regression_targets_for(2).unwrap(), vec![-1.0, 1.0]);
        assert_eq!(regression_targets_for(3).unwrap(), vec![-1.0, 0.0, 1.0]);
        assert!(regression_targets_for(1).is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let s = split(100, 0.8, 7).unwrap();
        assert_eq!(s.train.len(), 80);
        assert_eq!(s.test.len(), 20);
        assert_eq!(s, split(100, 0.8, 7).unwrap());
        assert!(split(100, 0.0, 7).is_err());
        assert!(split(100, 1.0, 7).is_err());
    }

    #[test]
    fn validation_carve_out_matches_test_size() {
        let s = split(100, 0.8, 7).unwrap().with_validation_like_test();
        assert_eq!(s.val.len(), 20);
        assert_eq!(s.train.len(), 60);
        s.validate(100).unwrap();
    }

    proptest! {
        #[test]
        fn split_is_disjoint_and_covering(rows in 2usize..300, fraction in 0.05f64..0.95, seed: u64) {
            let s = split(rows, fraction, seed).unwrap();
            s.validate(rows).unwrap();
            prop_assert_eq!(s.train.len() + s.test.len(), rows);
        }
    }
}
