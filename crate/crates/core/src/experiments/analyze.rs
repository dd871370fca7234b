//! Post-hoc analysis of checkpoints: TV complexity reports, input-space
//! slices, and loss/complexity landscapes over PCA or random parameter
//! planes, exported as CSV grids.

use super::io::{self, Checkpoint};
use super::{resolve_task, SplitConfig, TaskConfig};
use crate::complexity::{
    draw_tv_paths, input_slice_2d, landscape, pca_extents, random_plane, trajectory_pca,
    tv_complexity, LandscapeKind, LandscapeParams, SlicePlane, LANDSCAPE_RES, SLICE_RES,
};
use crate::error::{Error, Result};
use crate::training::{LossKind, Trajectory, TrajectoryPoint};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnalysisKind {
    Tv,
    Slice2d,
    LandscapePca,
    LandscapeRandom,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub task: TaskConfig,
    #[serde(default)]
    pub split: SplitConfig,
    pub what: AnalysisKind,
    #[serde(default)]
    pub loss: Option<LossKind>,
    /// Path count for TV reports (landscape cells use a quarter of it).
    #[serde(default = "default_paths")]
    pub n_paths: usize,
    #[serde(default = "default_points")]
    pub n_points: usize,
}

fn default_paths() -> usize {
    crate::complexity::DEFAULT_N_PATHS
}

fn default_points() -> usize {
    crate::complexity::DEFAULT_N_POINTS
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub what: AnalysisKind,
    pub seed: u64,
    pub mean_tv: Option<f64>,
    pub files: Vec<String>,
}

fn loss_for(cfg: &AnalysisConfig, head: crate::nets::Head) -> LossKind {
    cfg.loss.unwrap_or(match head {
        crate::nets::Head::Regression => LossKind::Mse,
        crate::nets::Head::Logits => LossKind::SoftmaxCe,
    })
}

/// Load the strided trajectory written next to a checkpoint by the train
/// command.
fn load_trajectory(checkpoint_path: &Path, template: &crate::nets::ParamSet) -> Result<Trajectory> {
    let name = checkpoint_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Config("checkpoint path has no file name".into()))?;
    let traj_name = name
        .replace("checkpoint_final_", "trajectory_")
        .replace("checkpoint_", "trajectory_");
    let path = checkpoint_path.with_file_name(traj_name);
    if !path.exists() {
        return Err(Error::Data(format!(
            "PCA landscape needs the training trajectory at {}",
            path.display()
        )));
    }
    let snaps: Vec<(usize, Vec<f64>)> = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
    Ok(Trajectory {
        points: snaps
            .into_iter()
            .map(|(step, flat)| TrajectoryPoint {
                step,
                params: template.unflatten_like(&flat),
                train_loss: 0.0,
                val_acc: 0.0,
            })
            .collect(),
    })
}

pub fn cmd_analyze(
    checkpoint_path: &Path,
    cfg: &AnalysisConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<AnalysisReport> {
    std::fs::create_dir_all(out_dir)?;
    let ckpt = Checkpoint::load(checkpoint_path)?;
    let (spec, params) = ckpt.to_model()?;
    let bundle = resolve_task(&cfg.task, &cfg.split)?;
    if bundle.data.dims() != spec.input_dim {
        return Err(Error::Config(format!(
            "checkpoint expects {} input dimensions, task has {}",
            spec.input_dim,
            bundle.data.dims()
        )));
    }
    let loss = loss_for(cfg, spec.head);
    let mut files = Vec::new();
    let mut mean_tv = None;

    match cfg.what {
        AnalysisKind::Tv => {
            let report = tv_complexity(
                &spec,
                &params,
                &bundle.data,
                &bundle.splits.train,
                cfg.n_paths,
                cfg.n_points,
                seed,
            )?;
            mean_tv = Some(report.mean);
            std::fs::write(out_dir.join("tv.csv"), io::tv_csv(&report))?;
            files.push("tv.csv".into());
        }
        AnalysisKind::Slice2d => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let anchor_row = bundle.splits.train[rng.gen_range(0..bundle.splits.train.len())];
            let d = bundle.data.dims();
            let anchor = bundle.data.x.data[anchor_row * d..(anchor_row + 1) * d].to_vec();
            let dim_m = rng.gen_range(0..d);
            let dim_n = (dim_m + 1 + rng.gen_range(0..d - 1)) % d;
            let plane = SlicePlane::AxisPair { anchor, dim_m, dim_n, range: (-1.0, 1.0) };
            let out_dim = rng.gen_range(0..spec.output_dim);
            let slice = input_slice_2d(&spec, &params, &plane, out_dim, SLICE_RES)?;
            let axis = io::linspace(-1.0, 1.0, SLICE_RES);
            std::fs::write(out_dir.join("slice.csv"), io::grid_csv(&axis, &axis, &slice.grid))?;
            files.push("slice.csv".into());
        }
        AnalysisKind::LandscapePca | AnalysisKind::LandscapeRandom => {
            let flat = params.flatten();
            let ((e1, e2), (u_range, v_range)) = match cfg.what {
                AnalysisKind::LandscapePca => {
                    let traj = load_trajectory(checkpoint_path, &params)?;
                    let plane = trajectory_pca(&traj)?;
                    let extents = pca_extents(&plane);
                    ((plane.e1, plane.e2), extents)
                }
                _ => {
                    let (e1, e2) = random_plane(flat.len(), seed);
                    let norm = flat.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let r = 0.1 * norm.max(1e-6);
                    ((e1, e2), ((-r, r), (-r, r)))
                }
            };
            let tv_paths = draw_tv_paths(
                &bundle.data,
                &bundle.splits.train,
                (cfg.n_paths / 4).max(8),
                spec.output_dim,
                seed,
            )?;
            let lp = LandscapeParams {
                ds: &bundle.data,
                rows: &bundle.splits.train,
                loss,
                tv_paths: &tv_paths,
                tv_points: (cfg.n_points / 2).max(10),
            };
            for (kind, name) in [
                (LandscapeKind::Loss, "landscape_loss.csv"),
                (LandscapeKind::TvComplexity, "landscape_tv.csv"),
            ] {
                let l = landscape(&spec, &params, &e1, &e2, u_range, v_range, kind, &lp)?;
                let u_axis = io::linspace(u_range.0, u_range.1, LANDSCAPE_RES);
                let v_axis = io::linspace(v_range.0, v_range.1, LANDSCAPE_RES);
                std::fs::write(out_dir.join(name), io::grid_csv(&u_axis, &v_axis, &l.grid))?;
                files.push(name.into());
            }
        }
    }

    let report = AnalysisReport { what: cfg.what, seed, mean_tv, files };
    std::fs::write(out_dir.join("analysis.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}
