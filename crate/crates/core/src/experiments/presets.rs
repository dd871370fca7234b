//! Canonical experiment configurations for the trained protocols:
//! grokking-style algorithmic runs, tabular classification, shortcut-learning
//! collages, and the tiny regression task the ablations run on.

use super::{
    ActConfig, CollageTile, ExperimentConfig, MetaSettings, ModelConfig, SplineConfig,
    SplitConfig, TaskConfig, ValRule,
};
use crate::metalearn::{EpisodeTag, MetaConfig, OuterObjective, RestartPoint, SamplerParams};
use crate::nets::Head;
use crate::splines::{InterpMode, SplineInit};
use crate::tasks::AlgTaskSpec;
use crate::training::{LossKind, Optimizer, SnapshotPolicy, TrainConfig};

/// Algorithmic-task protocol: 1-hidden-layer width-256 MLP, MSE on one-hot
/// targets, large-batch gradient descent at learning rate 1.0 for up to
/// 6e4 steps, random 80/20 split.
pub fn grokking_preset(task: AlgTaskSpec, seeds: Vec<u64>) -> ExperimentConfig {
    let mut train = TrainConfig::new(Optimizer::Gd, 1.0, 60_000, LossKind::Mse);
    train.snapshot = SnapshotPolicy::Stride(25);
    ExperimentConfig {
        task: TaskConfig::Algorithmic { spec: task, as_regression: false },
        split: SplitConfig { fraction: 0.8, seed: 0, val: ValRule::None },
        model: ModelConfig {
            hidden: vec![256],
            residual: false,
            activation: ActConfig::Relu,
            per_layer: false,
            iaf: None,
            spectral_norm: false,
            head: Head::Logits,
            init_scale: 1.0,
        },
        train,
        meta: None,
        seeds,
        output_dir: None,
    }
}

/// Tabular protocol: width-256 MLPs of depth 1-4 trained with RMSprop on
/// 4096-example mini-batches.
pub fn tabular_preset(task: TaskConfig, depth: usize, lr: f64, seeds: Vec<u64>) -> ExperimentConfig {
    let mut train = TrainConfig::new(Optimizer::Rmsprop, lr, 2_000, LossKind::SoftmaxCe);
    train.batch_size = Some(4096);
    ExperimentConfig {
        task,
        split: SplitConfig::default(),
        model: ModelConfig {
            hidden: vec![256; depth.clamp(1, 4)],
            residual: false,
            activation: ActConfig::Relu,
            per_layer: false,
            iaf: None,
            spectral_norm: false,
            head: Head::Logits,
            init_scale: 1.0,
        },
        train,
        meta: None,
        seeds,
        output_dir: None,
    }
}

/// Shortcut-learning protocol: 1-hidden-layer width-32 MLPs with spectral
/// normalization, large-batch gradient descent at learning rate 0.01.
pub fn shortcut_preset(
    a: TaskConfig,
    b: TaskConfig,
    objective_tile: CollageTile,
    seeds: Vec<u64>,
) -> ExperimentConfig {
    let mut train = TrainConfig::new(Optimizer::Gd, 0.01, 2_000, LossKind::SoftmaxCe);
    train.batch_size = Some(4096);
    ExperimentConfig {
        task: TaskConfig::Collage {
            a: Box::new(a),
            b: Box::new(b),
            train_rows: 4096,
            test_rows: 1024,
            seed: 0,
            objective_tile,
        },
        split: SplitConfig::default(),
        model: ModelConfig {
            hidden: vec![32],
            residual: false,
            activation: ActConfig::Relu,
            per_layer: false,
            iaf: None,
            spectral_norm: true,
            head: Head::Logits,
            init_scale: 1.0,
        },
        train,
        meta: None,
        seeds,
        output_dir: None,
    }
}

/// Small class-ID regression task the interpolation-mode and outer-objective
/// ablations run on end to end.
pub fn tiny_regression_preset(seeds: Vec<u64>) -> ExperimentConfig {
    let mut train = TrainConfig::new(Optimizer::Rmsprop, 3e-3, 260, LossKind::Mse);
    train.batch_size = Some(1024);
    ExperimentConfig {
        task: TaskConfig::SynthDigits { rows: 1500, seed: 77, crop: 5, as_regression: true },
        split: SplitConfig { fraction: 0.8, seed: 1, val: ValRule::LikeTest },
        model: ModelConfig {
            hidden: vec![64],
            residual: false,
            activation: ActConfig::Spline(SplineConfig {
                n_c: 50,
                a: -5.0,
                b: 5.0,
                mode: InterpMode::Linear,
                init: SplineInit::Zeros,
            }),
            per_layer: false,
            iaf: None,
            spectral_norm: false,
            head: Head::Regression,
            init_scale: 1.0,
        },
        train,
        meta: Some(MetaSettings {
            base: tiny_regression_meta_base(),
            grid: vec![RestartPoint {
                seed: 1,
                outer_lr: 0.05,
                n_c: 50,
                truncation: 5,
                init: SplineInit::Zeros,
            }],
        }),
        seeds,
        output_dir: None,
    }
}

pub fn tiny_regression_meta_base() -> MetaConfig {
    let mut base = MetaConfig::new(0.05, LossKind::Mse);
    base.n_outer_max = 60;
    base.inner_lr = 0.05;
    base.inner_step_cap = 40;
    base.patience = 20;
    base.objective = OuterObjective::Validation;
    base.episode_tag = EpisodeTag::InDistribution;
    base.sampler = SamplerParams { train_cap: 1024, val_cap: 256 };
    base
}

/// The restart-grid bounds the search honors: ψ learning rate in [0.01, 0.2],
/// control points in [50, 400], truncation in [1, 50], zero or ReLU
/// initialization.
pub const RESTART_OUTER_LR_RANGE: (f64, f64) = (0.01, 0.2);
pub const RESTART_N_C_RANGE: (usize, usize) = (50, 400);
pub const RESTART_TRUNCATION_RANGE: (usize, usize) = (1, 50);

/// A reduced restart grid within the documented bounds.
pub fn reduced_restart_grid(points: usize, n_c: usize, base_seed: u64) -> Vec<RestartPoint> {
    let lrs = [0.05, 0.1, 0.2, 0.01];
    let truncs = [5, 10, 3, 1];
    let inits = [SplineInit::Zeros, SplineInit::Relu];
    (0..points)
        .map(|i| RestartPoint {
            seed: base_seed + i as u64,
            outer_lr: lrs[i % lrs.len()],
            n_c,
            truncation: truncs[i % truncs.len()],
            init: inits[i % inits.len()],
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::AlgExpr;

    #[test]
    fn grokking_preset_matches_protocol() {
        let cfg = grokking_preset(AlgTaskSpec::Modular { expr: AlgExpr::Add, p: 27 }, vec![0]);
        assert_eq!(cfg.train.lr, 1.0);
        assert_eq!(cfg.train.max_steps, 60_000);
        assert_eq!(cfg.train.optimizer, Optimizer::Gd);
        assert_eq!(cfg.train.loss, LossKind::Mse);
        assert_eq!(cfg.model.hidden, vec![256]);
        // batch defaults to 4096 examples (full batch on smaller tasks)
        assert_eq!(cfg.train.batch_size, None);
        assert_eq!(cfg.split.fraction, 0.8);
    }

    #[test]
    fn tabular_preset_matches_protocol() {
        let cfg = tabular_preset(
            TaskConfig::Staircase { dims: 2, bands: 4, rows: 100, seed: 0 },
            3,
            1e-3,
            vec![0],
        );
        assert_eq!(cfg.train.optimizer, Optimizer::Rmsprop);
        assert_eq!(cfg.train.batch_size, Some(4096));
        assert_eq!(cfg.model.hidden, vec![256, 256, 256]);
    }

    #[test]
    fn shortcut_preset_matches_protocol() {
        let a = TaskConfig::SynthDigits { rows: 100, seed: 1, crop: 0, as_regression: false };
        let b = TaskConfig::SynthDigits { rows: 100, seed: 2, crop: 0, as_regression: false };
        let cfg = shortcut_preset(a, b, CollageTile::A, vec![0]);
        assert_eq!(cfg.model.hidden, vec![32]);
        assert_eq!(cfg.train.lr, 0.01);
        assert!(cfg.model.spectral_norm);
    }

    #[test]
    fn reduced_grid_honors_the_documented_bounds() {
        let grid = reduced_restart_grid(4, 50, 7);
        assert_eq!(grid.len(), 4);
        for p in &grid {
            assert!(p.outer_lr >= RESTART_OUTER_LR_RANGE.0 && p.outer_lr <= RESTART_OUTER_LR_RANGE.1);
            assert!(p.n_c >= RESTART_N_C_RANGE.0 && p.n_c <= RESTART_N_C_RANGE.1);
            assert!(p.truncation >= RESTART_TRUNCATION_RANGE.0 && p.truncation <= RESTART_TRUNCATION_RANGE.1);
        }
        // both initializations are attempted
        assert!(grid.iter().any(|p| p.init == SplineInit::Zeros));
        assert!(grid.iter().any(|p| p.init == SplineInit::Relu));
    }
}
