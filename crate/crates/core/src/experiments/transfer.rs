//! Task × activation-function transfer matrices over algorithmic tasks.
//! Every cell trains a fresh model with a fixed activation and records the
//! steps needed to reach the target test accuracy (or the best accuracy when
//! the budget runs out). Rows are normalized to their best cell.

use crate::error::{Error, Result};
use crate::nets::Head;
use crate::splines::{ActKind, ActivationBinding, SplineActivation};
use crate::tasks::{gen_algorithmic, split, AlgTaskSpec, Dataset, Targets};
use crate::tensor::Tensor;
use crate::training::{train, LossKind, Optimizer, SnapshotPolicy, TrainConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AfKind {
    Relu,
    /// One shared function, or one per hidden layer.
    Splines(Vec<SplineActivation>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AfSource {
    pub name: String,
    pub kind: AfKind,
}

impl AfSource {
    pub fn relu() -> Self {
        AfSource { name: "relu".into(), kind: AfKind::Relu }
    }

    pub fn binding(&self, n_hidden: usize) -> Result<ActivationBinding> {
        Ok(match &self.kind {
            AfKind::Relu => ActivationBinding::Shared(ActKind::Relu),
            AfKind::Splines(splines) => {
                if splines.len() == 1 {
                    ActivationBinding::Shared(ActKind::Spline(splines[0].clone()))
                } else if splines.len() == n_hidden {
                    ActivationBinding::PerLayer(
                        splines.iter().cloned().map(ActKind::Spline).collect(),
                    )
                } else {
                    return Err(Error::Config(format!(
                        "activation source '{}' has {} functions for {} layers",
                        self.name,
                        splines.len(),
                        n_hidden
                    )));
                }
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreKind {
    NormalizedConvergence,
    NormalizedAccuracy,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub tasks: Vec<String>,
    pub sources: Vec<String>,
    /// Row-major scores in [0,1]; each row's best cell scores exactly 1.
    pub scores: Vec<f64>,
    /// Solved rows score convergence speed; unsolved rows score accuracy.
    pub row_kinds: Vec<ScoreKind>,
    pub column_means: Vec<f64>,
    pub raw_steps: Vec<Option<usize>>,
    pub raw_acc: Vec<f64>,
}

impl TransferMatrix {
    pub fn score(&self, row: usize, col: usize) -> f64 {
        self.scores[row * self.sources.len() + col]
    }

    pub fn to_csv(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::from("task");
        for s in &self.sources {
            let _ = write!(out, ",{s}");
        }
        out.push('\n');
        for (r, task) in self.tasks.iter().enumerate() {
            let _ = write!(out, "{task}");
            for c in 0..self.sources.len() {
                let _ = write!(out, ",{}", self.score(r, c));
            }
            out.push('\n');
        }
        let _ = write!(out, "column_mean");
        for m in &self.column_means {
            let _ = write!(out, ",{m}");
        }
        out.push('\n');
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferBudget {
    pub width: usize,
    pub lr: f64,
    pub max_steps: usize,
    /// A task counts as solved when test accuracy reaches this level.
    pub target_acc: f64,
    pub split_fraction: f64,
    pub split_seed: u64,
    pub train_seed: u64,
    pub snapshot_stride: usize,
}

impl Default for TransferBudget {
    fn default() -> Self {
        TransferBudget {
            width: 256,
            lr: 1.0,
            max_steps: 60_000,
            target_acc: 0.95,
            split_fraction: 0.8,
            split_seed: 0,
            train_seed: 0,
            snapshot_stride: 25,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct CellResult {
    steps_to_target: Option<usize>,
    best_test_acc: f64,
}

fn run_cell(
    data: &Dataset,
    source: &AfSource,
    budget: &TransferBudget,
) -> Result<CellResult> {
    let spec = crate::nets::MlpSpec {
        input_dim: data.dims(),
        hidden: vec![budget.width],
        output_dim: data.class_count,
        residual: false,
        activation: source.binding(1)?,
        iaf: None,
        spectral_norm: false,
        head: Head::Logits,
        init_scale: 1.0,
    };
    let splits = split(data.rows(), budget.split_fraction, budget.split_seed)?;
    let mut cfg = TrainConfig::new(Optimizer::Gd, budget.lr, budget.max_steps, LossKind::Mse);
    cfg.seed = budget.train_seed;
    cfg.snapshot = SnapshotPolicy::Stride(budget.snapshot_stride);
    let outcome = train(&spec, data, &splits, &cfg)?;
    let mut steps_to_target = None;
    let mut best_test_acc: f64 = 0.0;
    for row in &outcome.metrics {
        best_test_acc = best_test_acc.max(row.test_acc);
        if steps_to_target.is_none() && row.test_acc >= budget.target_acc {
            steps_to_target = Some(row.step);
        }
    }
    Ok(CellResult { steps_to_target, best_test_acc })
}

/// Train every task/activation combination and normalize scores per row:
/// solved rows score best_steps/steps (unsolved cells 0), unsolved rows score
/// acc/best_acc.
pub fn transfer_matrix(
    tasks: &[AlgTaskSpec],
    sources: &[AfSource],
    budget: &TransferBudget,
) -> Result<TransferMatrix> {
    if tasks.is_empty() || sources.is_empty() {
        return Err(Error::Config("transfer matrix needs tasks and activation sources".into()));
    }
    let datasets: Vec<Dataset> = tasks.iter().map(gen_algorithmic).collect::<Result<_>>()?;
    let cells: Vec<Result<CellResult>> = datasets
        .par_iter()
        .flat_map(|data| sources.par_iter().map(move |source| (data, source)))
        .map(|(data, source)| run_cell(data, source, budget))
        .collect();
    let n_cols = sources.len();
    let mut raw_steps = Vec::with_capacity(cells.len());
    let mut raw_acc = Vec::with_capacity(cells.len());
    for cell in cells {
        let cell = cell?;
        raw_steps.push(cell.steps_to_target);
        raw_acc.push(cell.best_test_acc);
    }

    let mut scores = vec![0.0; tasks.len() * n_cols];
    let mut row_kinds = Vec::with_capacity(tasks.len());
    for r in 0..tasks.len() {
        let row_steps = &raw_steps[r * n_cols..(r + 1) * n_cols];
        let row_acc = &raw_acc[r * n_cols..(r + 1) * n_cols];
        let best_steps = row_steps.iter().flatten().min().copied();
        match best_steps {
            Some(best) => {
                row_kinds.push(ScoreKind::NormalizedConvergence);
                for c in 0..n_cols {
                    scores[r * n_cols + c] = match row_steps[c] {
                        Some(steps) => best as f64 / steps as f64,
                        None => 0.0,
                    };
                }
            }
            None => {
                row_kinds.push(ScoreKind::NormalizedAccuracy);
                let best_acc = row_acc.iter().cloned().fold(0.0, f64::max);
                if best_acc > 0.0 {
                    for c in 0..n_cols {
                        scores[r * n_cols + c] = row_acc[c] / best_acc;
                    }
                } else {
                    // nothing learned anywhere: mark the first cell as best
                    scores[r * n_cols] = 1.0;
                }
            }
        }
    }
    let column_means = (0..n_cols)
        .map(|c| (0..tasks.len()).map(|r| scores[r * n_cols + c]).sum::<f64>() / tasks.len() as f64)
        .collect();
    Ok(TransferMatrix {
        tasks: tasks.iter().map(AlgTaskSpec::name).collect(),
        sources: sources.iter().map(|s| s.name.clone()).collect(),
        scores,
        row_kinds,
        column_means,
        raw_steps,
        raw_acc,
    })
}

/// Merge same-domain algorithmic tasks into one dataset, optionally appending
/// a one-hot task identifier to the operand encoding.
pub fn build_all_tasks_dataset(tasks: &[AlgTaskSpec], task_id_input: bool) -> Result<Dataset> {
    if tasks.is_empty() {
        return Err(Error::Config("need at least one task".into()));
    }
    let k = tasks[0].domain_size();
    if tasks.iter().any(|t| t.domain_size() != k) {
        return Err(Error::Config(
            "all-tasks training needs tasks over the same domain size".into(),
        ));
    }
    let sets: Vec<Dataset> = tasks.iter().map(gen_algorithmic).collect::<Result<_>>()?;
    let id_width = if task_id_input { tasks.len() } else { 0 };
    let dims = 2 * k + id_width;
    let rows: usize = sets.iter().map(Dataset::rows).sum();
    let mut x = Tensor::zeros(rows, dims);
    let mut classes = Vec::with_capacity(rows);
    let mut at = 0;
    for (t, set) in sets.iter().enumerate() {
        let labels = match &set.targets {
            Targets::Classes(c) => c,
            _ => unreachable!(),
        };
        for r in 0..set.rows() {
            x.data[at * dims..at * dims + 2 * k]
                .copy_from_slice(&set.x.data[r * 2 * k..(r + 1) * 2 * k]);
            if task_id_input {
                x.data[at * dims + 2 * k + t] = 1.0;
            }
            classes.push(labels[r]);
            at += 1;
        }
    }
    Ok(Dataset {
        x,
        targets: Targets::Classes(classes),
        class_count: k,
        provenance: format!("all-tasks({})", tasks.len()),
    })
}

/// JSON description of a transfer run: the task list, the activation columns
/// (ReLU or spline files produced by the meta command), and the budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferRunConfig {
    pub tasks: Vec<AlgTaskSpec>,
    pub sources: Vec<AfSourceConfig>,
    #[serde(default)]
    pub budget: TransferBudget,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AfSourceConfig {
    pub name: String,
    /// Spline JSON path; absent means the ReLU column.
    #[serde(default)]
    pub spline_file: Option<std::path::PathBuf>,
}

impl TransferRunConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn resolve_sources(&self) -> Result<Vec<AfSource>> {
        self.sources
            .iter()
            .map(|s| {
                Ok(match &s.spline_file {
                    None => AfSource { name: s.name.clone(), kind: AfKind::Relu },
                    Some(path) => AfSource {
                        name: s.name.clone(),
                        kind: AfKind::Splines(super::load_spline_file(path)?),
                    },
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::AlgExpr;

    #[test]
    fn row_normalization_peaks_at_one() {
        let tasks = vec![
            AlgTaskSpec::Modular { expr: AlgExpr::Add, p: 5 },
            AlgTaskSpec::Modular { expr: AlgExpr::Mul, p: 5 },
        ];
        let sources = vec![AfSource::relu()];
        let budget = TransferBudget {
            width: 32,
            max_steps: 200,
            snapshot_stride: 10,
            ..TransferBudget::default()
        };
        let m = transfer_matrix(&tasks, &sources, &budget).unwrap();
        for r in 0..m.tasks.len() {
            let row_max = (0..m.sources.len()).map(|c| m.score(r, c)).fold(0.0, f64::max);
            assert!((row_max - 1.0).abs() < 1e-12, "row {r} max {row_max}");
        }
        assert_eq!(m.scores.len(), 2);
    }

    #[test]
    fn all_tasks_dataset_appends_task_ids() {
        let tasks = vec![
            AlgTaskSpec::Modular { expr: AlgExpr::Add, p: 3 },
            AlgTaskSpec::Modular { expr: AlgExpr::Sub, p: 3 },
        ];
        let with_id = build_all_tasks_dataset(&tasks, true).unwrap();
        assert_eq!(with_id.rows(), 18);
        assert_eq!(with_id.dims(), 8);
        let without = build_all_tasks_dataset(&tasks, false).unwrap();
        assert_eq!(without.dims(), 6);
        // mixed domain sizes are refused
        let bad = vec![
            AlgTaskSpec::Modular { expr: AlgExpr::Add, p: 3 },
            AlgTaskSpec::Modular { expr: AlgExpr::Add, p: 5 },
        ];
        assert!(build_all_tasks_dataset(&bad, true).is_err());
    }
}
