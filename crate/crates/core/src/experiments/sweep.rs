//! Tanh-prefactor baseline sweep: tanh(αx) with α tuned on validation
//! accuracy and the learning rate rescaled as λ/α.

use crate::error::{Error, Result};
use crate::splines::{ActKind, ActivationBinding};
use crate::training::{eval_metric, train, TrainConfig};
use super::{output_dim_for, resolve_model, resolve_task, ExperimentConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub effective_lr: f64,
    pub val_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub best_alpha: f64,
    pub best_val_acc: f64,
    pub best_test_acc: f64,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::from("alpha,effective_lr,val_acc,test_acc\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.alpha, r.effective_lr, r.val_acc, r.test_acc);
        }
        out
    }
}

/// Train once per α (shared across layers) with lr λ/α; keep the best
/// validation accuracy.
pub fn prefactor_sweep(cfg: &ExperimentConfig, alphas: &[f64]) -> Result<SweepReport> {
    if alphas.is_empty() || alphas.iter().any(|&a| a <= 0.0) {
        return Err(Error::Config("prefactor grid must be non-empty and positive".into()));
    }
    let bundle = resolve_task(&cfg.task, &cfg.split)?;
    let out_dim = output_dim_for(&bundle.data, cfg.model.head);
    let base_spec = resolve_model(&cfg.model, bundle.data.dims(), out_dim)?;
    let base_lr = cfg.train.lr;

    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let mut spec = base_spec.clone();
        spec.activation = ActivationBinding::Shared(ActKind::TanhPrefactor(alpha));
        let mut tc: TrainConfig = cfg.train.clone();
        tc.lr = base_lr / alpha;
        tc.seed = *cfg.seeds.first().unwrap_or(&0);
        let outcome = train(&spec, &bundle.data, &bundle.splits, &tc)?;
        let test_acc =
            eval_metric(&spec, &outcome.best_params, &bundle.data, &bundle.splits.test, tc.loss)?;
        rows.push(SweepRow {
            alpha,
            effective_lr: tc.lr,
            val_acc: outcome.best_val_acc,
            test_acc,
        });
    }
    let best = rows
        .iter()
        .cloned()
        .max_by(|a, b| a.val_acc.partial_cmp(&b.val_acc).unwrap())
        .expect("non-empty grid");
    Ok(SweepReport {
        rows,
        best_alpha: best.alpha,
        best_val_acc: best.val_acc,
        best_test_acc: best.test_acc,
    })
}
