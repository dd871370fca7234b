//! On-disk run artifacts: metrics CSV streams, checkpoint and spline JSON,
//! grid CSV exports. Numeric CSV cells use the shortest round-trip f64
//! formatting, so reruns with the same seed produce byte-identical bodies.
//! Wall-clock metadata goes to a separate file that determinism checks skip.

use crate::error::{Error, Result};
use crate::nets::{init_params, MlpSpec, ParamSet};
use crate::splines::SplineActivation;
use crate::training::MetricsRow;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

/// Model snapshot: architecture, flattened parameters, and the learnable
/// activation values when the spec carries splines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub spec: MlpSpec,
    pub params_flat: Vec<f64>,
    pub psi: Option<Vec<SplineActivation>>,
}

impl Checkpoint {
    pub fn new(spec: &MlpSpec, params: &ParamSet) -> Self {
        let mut spec = spec.clone();
        let splines: Vec<SplineActivation> =
            spec.splines_mut().into_iter().map(|s| s.clone()).collect();
        Checkpoint {
            spec,
            params_flat: params.flatten(),
            psi: if splines.is_empty() { None } else { Some(splines) },
        }
    }

    pub fn to_model(&self) -> Result<(MlpSpec, ParamSet)> {
        let mut spec = self.spec.clone();
        if let Some(psi) = &self.psi {
            let mut slots = spec.splines_mut();
            if slots.len() != psi.len() {
                return Err(Error::Data(format!(
                    "checkpoint has {} activation vectors for {} spline slots",
                    psi.len(),
                    slots.len()
                )));
            }
            for (slot, s) in slots.iter_mut().zip(psi) {
                **slot = s.clone();
            }
        }
        let template = init_params(&spec, 0);
        if template.flatten().len() != self.params_flat.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} parameters, spec wants {}",
                self.params_flat.len(),
                template.flatten().len()
            )));
        }
        let params = template.unflatten_like(&self.params_flat);
        Ok((spec, params))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v}")
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("step,train_loss,train_acc,val_acc,test_acc\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.step,
            fmt_f64(r.train_loss),
            fmt_f64(r.train_acc),
            fmt_f64(r.val_acc),
            fmt_f64(r.test_acc)
        );
    }
    out
}

pub fn meta_log_csv(rows: &[crate::metalearn::MetaLogRow]) -> String {
    let mut out = String::from("outer_step,n_tr,episode_seed,outer_loss,retrain_val_acc\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.outer_step,
            r.n_tr,
            r.episode_seed,
            fmt_f64(r.outer_loss),
            fmt_f64(r.retrain_val_acc)
        );
    }
    out
}

pub fn restart_log_csv(rows: &[crate::metalearn::RestartLogRow]) -> String {
    let mut out = String::from("index,seed,outer_lr,n_c,truncation,init,retrain_val_acc,diverged\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:?},{},{}",
            r.index,
            r.point.seed,
            fmt_f64(r.point.outer_lr),
            r.point.n_c,
            r.point.truncation,
            r.point.init,
            fmt_f64(r.retrain_val_acc),
            r.diverged
        );
    }
    out
}

/// Row-major grid export with a `u,v,value` header.
pub fn grid_csv(u_axis: &[f64], v_axis: &[f64], grid: &[f64]) -> String {
    let mut out = String::from("u,v,value\n");
    for (iu, u) in u_axis.iter().enumerate() {
        for (iv, v) in v_axis.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", fmt_f64(*u), fmt_f64(*v), fmt_f64(grid[iu * v_axis.len() + iv]));
        }
    }
    out
}

pub fn tv_csv(report: &crate::complexity::TvReport) -> String {
    let mut out = String::from("path,out_dim,tv\n");
    for (i, (tv, dim)) in report.per_path.iter().zip(&report.out_dims).enumerate() {
        let _ = writeln!(out, "{},{},{}", i, dim, fmt_f64(*tv));
    }
    out
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Export a dataset in the tabular CSV schema (feature columns then `label`).
pub fn dataset_csv(ds: &crate::tasks::Dataset) -> String {
    let mut out = String::new();
    for c in 0..ds.dims() {
        let _ = write!(out, "x{c},");
    }
    out.push_str("label\n");
    for r in 0..ds.rows() {
        for c in 0..ds.dims() {
            let _ = write!(out, "{},", fmt_f64(ds.x.at(r, c)));
        }
        let _ = writeln!(out, "{}", fmt_f64(ds.value_of(r)));
    }
    out
}
