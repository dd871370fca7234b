//! Experiment orchestration: JSON experiment configs, task and model
//! resolution, run directories, and the commands the CLI exposes
//! (train / meta / transfer / sweep / analyze / gen-data).

pub mod analyze;
pub mod io;
pub mod knn;
pub mod presets;
pub mod sweep;
pub mod transfer;

use crate::error::{Error, Result};
use crate::metalearn::{
    restart_search, EpisodePools, MetaConfig, RestartGrid, RestartPoint,
};
use crate::nets::{Head, MlpSpec};
use crate::splines::{init_spline, ActKind, ActivationBinding, InterpMode, SplineActivation, SplineInit};
use crate::tasks::{
    gen_abs_regression, gen_algorithmic, gen_staircase, gen_synth_digit_images, gen_two_blobs,
    load_idx_images, load_tabular_csv, make_collage, split, AlgTaskSpec, CollageMode, CropSpec,
    Dataset, NormalizationMap, SplitSpec, TaskKind,
};
use crate::training::{train, eval_metric, TrainConfig, TrainOutcome};
use io::Checkpoint;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValRule {
    None,
    LikeTest,
    Rows(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub fraction: f64,
    pub seed: u64,
    pub val: ValRule,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { fraction: 0.8, seed: 0, val: ValRule::LikeTest }
    }
}

impl SplitConfig {
    fn apply(&self, rows: usize) -> Result<SplitSpec> {
        let base = split(rows, self.fraction, self.seed)?;
        Ok(match self.val {
            ValRule::None => base,
            ValRule::LikeTest => base.with_validation_like_test(),
            ValRule::Rows(n) => base.with_validation_rows(n),
        })
    }
}

/// Which tile of a collage the run optimizes for: selects the validation
/// pool (used as the OOD episode target) and the primary test set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CollageTile {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum TaskConfig {
    Algorithmic {
        spec: AlgTaskSpec,
        #[serde(default)]
        as_regression: bool,
    },
    Staircase {
        dims: usize,
        bands: usize,
        rows: usize,
        seed: u64,
    },
    SynthDigits {
        rows: usize,
        seed: u64,
        #[serde(default)]
        crop: usize,
        #[serde(default)]
        as_regression: bool,
    },
    Csv {
        path: PathBuf,
        label_column: String,
        kind: TaskKind,
        #[serde(default = "default_true")]
        normalize: bool,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        crop: CropSpec,
        #[serde(default)]
        as_regression: bool,
    },
    TwoBlobs {
        per_class: usize,
        margin: f64,
        seed: u64,
    },
    AbsRegression {
        rows: usize,
        seed: u64,
    },
    Collage {
        a: Box<TaskConfig>,
        b: Box<TaskConfig>,
        train_rows: usize,
        test_rows: usize,
        seed: u64,
        objective_tile: CollageTile,
    },
}

fn default_true() -> bool {
    true
}

/// A resolved task: the dataset, its splits, and (for collages) the pool the
/// OOD episode objective draws validation rows from.
#[derive(Debug, Clone)]
pub struct TaskBundle {
    pub data: Dataset,
    pub splits: SplitSpec,
    pub ood_val_pool: Option<Vec<usize>>,
    pub normalization: Option<NormalizationMap>,
}

impl TaskBundle {
    pub fn episode_pools(&self) -> EpisodePools {
        EpisodePools {
            train: self.splits.train.clone(),
            ood_val: self.ood_val_pool.clone(),
            test: self.splits.test.clone(),
        }
    }
}

/// Crop a synthetic digit image set on every side and turn it into a dataset
/// through the IDX path so the file format is exercised end to end.
fn synth_digits_dataset(rows: usize, seed: u64, crop: usize) -> Result<Dataset> {
    let dir = std::env::temp_dir().join(format!("afmeta-synth-{seed}-{rows}"));
    std::fs::create_dir_all(&dir)?;
    let images_path = dir.join("images.idx3-ubyte");
    let labels_path = dir.join("labels.idx1-ubyte");
    let (images, labels) = gen_synth_digit_images(rows, seed);
    crate::tasks::write_idx_images(&images_path, &images, 28, 28)?;
    crate::tasks::write_idx_labels(&labels_path, &labels)?;
    load_idx_images(&images_path, &labels_path, CropSpec::all_sides(crop))
}

pub fn resolve_task(cfg: &TaskConfig, split_cfg: &SplitConfig) -> Result<TaskBundle> {
    match cfg {
        TaskConfig::Algorithmic { spec, as_regression } => {
            let mut data = gen_algorithmic(spec)?;
            if *as_regression {
                data = data.to_class_regression()?;
            }
            let splits = split_cfg.apply(data.rows())?;
            Ok(TaskBundle { data, splits, ood_val_pool: None, normalization: None })
        }
        TaskConfig::Staircase { dims, bands, rows, seed } => {
            let data = gen_staircase(*dims, *bands, *rows, *seed)?;
            let splits = split_cfg.apply(data.rows())?;
            Ok(TaskBundle { data, splits, ood_val_pool: None, normalization: None })
        }
        TaskConfig::SynthDigits { rows, seed, crop, as_regression } => {
            let mut data = synth_digits_dataset(*rows, *seed, *crop)?;
            if *as_regression {
                data = data.to_class_regression()?;
            }
            let splits = split_cfg.apply(data.rows())?;
            Ok(TaskBundle { data, splits, ood_val_pool: None, normalization: None })
        }
        TaskConfig::Csv { path, label_column, kind, normalize } => {
            let mut data = load_tabular_csv(path, label_column, *kind)?;
            let splits = split_cfg.apply(data.rows())?;
            let normalization = if *normalize {
                Some(NormalizationMap::fit_and_apply(&mut data, &splits.train)?)
            } else {
                None
            };
            Ok(TaskBundle { data, splits, ood_val_pool: None, normalization })
        }
        TaskConfig::Idx { images, labels, crop, as_regression } => {
            let mut data = load_idx_images(images, labels, *crop)?;
            if *as_regression {
                data = data.to_class_regression()?;
            }
            let splits = split_cfg.apply(data.rows())?;
            Ok(TaskBundle { data, splits, ood_val_pool: None, normalization: None })
        }
        TaskConfig::TwoBlobs { per_class, margin, seed } => {
            let data = gen_two_blobs(*per_class, *margin, *seed);
            let splits = split_cfg.apply(data.rows())?;
            Ok(TaskBundle { data, splits, ood_val_pool: None, normalization: None })
        }
        TaskConfig::AbsRegression { rows, seed } => {
            let data = gen_abs_regression(*rows, *seed);
            let splits = split_cfg.apply(data.rows())?;
            Ok(TaskBundle { data, splits, ood_val_pool: None, normalization: None })
        }
        TaskConfig::Collage { a, b, train_rows, test_rows, seed, objective_tile } => {
            let src_a = resolve_task(a, &SplitConfig { val: ValRule::None, ..*split_cfg })?.data;
            let src_b = resolve_task(b, &SplitConfig { val: ValRule::None, ..*split_cfg })?.data;
            let ambiguous =
                make_collage(&src_a, &src_b, CollageMode::AmbiguousTrain, *train_rows, *seed)?;
            let (val_mode, test_mode) = match objective_tile {
                CollageTile::A => (CollageMode::TestA, CollageMode::TestA),
                CollageTile::B => (CollageMode::TestB, CollageMode::TestB),
            };
            let val = make_collage(&src_a, &src_b, val_mode, *test_rows, seed.wrapping_add(1))?;
            let test = make_collage(&src_a, &src_b, test_mode, *test_rows, seed.wrapping_add(2))?;

            // concatenate [ambiguous | val | test] into one dataset
            let mut x = ambiguous.x.data.clone();
            x.extend_from_slice(&val.x.data);
            x.extend_from_slice(&test.x.data);
            let classes = |d: &Dataset| match &d.targets {
                crate::tasks::Targets::Classes(c) => c.clone(),
                _ => unreachable!("collages are classification data"),
            };
            let mut targets = classes(&ambiguous);
            targets.extend(classes(&val));
            targets.extend(classes(&test));
            let rows = ambiguous.rows() + val.rows() + test.rows();
            let data = Dataset {
                x: crate::tensor::Tensor::new(rows, ambiguous.dims(), x),
                targets: crate::tasks::Targets::Classes(targets),
                class_count: ambiguous.class_count,
                provenance: format!("{} | {}", ambiguous.provenance, test.provenance),
            };
            let train: Vec<usize> = (0..ambiguous.rows()).collect();
            let val_idx: Vec<usize> = (ambiguous.rows()..ambiguous.rows() + val.rows()).collect();
            let test_idx: Vec<usize> = (ambiguous.rows() + val.rows()..rows).collect();
            let splits = SplitSpec {
                train,
                val: val_idx.clone(),
                test: test_idx,
                fraction: 1.0,
                seed: *seed,
            };
            Ok(TaskBundle { data, splits, ood_val_pool: Some(val_idx), normalization: None })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineConfig {
    pub n_c: usize,
    pub a: f64,
    pub b: f64,
    pub mode: InterpMode,
    pub init: SplineInit,
}

impl SplineConfig {
    pub fn build(&self) -> Result<SplineActivation> {
        Ok(init_spline(self.init, self.n_c, self.a, self.b)?.with_mode(self.mode))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ActConfig {
    Relu,
    TanhPrefactor { alpha: f64 },
    Spline(SplineConfig),
    /// Load a learned activation persisted as spline JSON (a single object
    /// or an array for per-layer functions).
    SplineFile { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub residual: bool,
    pub activation: ActConfig,
    /// Learn/apply a distinct activation per hidden layer.
    #[serde(default)]
    pub per_layer: bool,
    #[serde(default)]
    pub iaf: Option<SplineConfig>,
    #[serde(default)]
    pub spectral_norm: bool,
    pub head: Head,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

fn default_init_scale() -> f64 {
    1.0
}

pub fn load_spline_file(path: &Path) -> Result<Vec<SplineActivation>> {
    let text = std::fs::read_to_string(path)?;
    if let Ok(one) = serde_json::from_str::<SplineActivation>(&text) {
        one.validate()?;
        return Ok(vec![one]);
    }
    let many: Vec<SplineActivation> = serde_json::from_str(&text)?;
    many.iter().try_for_each(|s| s.validate())?;
    Ok(many)
}

pub fn resolve_model(cfg: &ModelConfig, input_dim: usize, output_dim: usize) -> Result<MlpSpec> {
    let n_hidden = cfg.hidden.len();
    let activation = match &cfg.activation {
        ActConfig::Relu => ActivationBinding::Shared(ActKind::Relu),
        ActConfig::TanhPrefactor { alpha } => {
            ActivationBinding::Shared(ActKind::TanhPrefactor(*alpha))
        }
        ActConfig::Spline(sc) => {
            if cfg.per_layer {
                ActivationBinding::PerLayer(
                    (0..n_hidden).map(|_| Ok(ActKind::Spline(sc.build()?))).collect::<Result<_>>()?,
                )
            } else {
                ActivationBinding::Shared(ActKind::Spline(sc.build()?))
            }
        }
        ActConfig::SplineFile { path } => {
            let splines = load_spline_file(path)?;
            if splines.len() == 1 && !cfg.per_layer {
                ActivationBinding::Shared(ActKind::Spline(splines.into_iter().next().unwrap()))
            } else if splines.len() == n_hidden {
                ActivationBinding::PerLayer(
                    splines.into_iter().map(ActKind::Spline).collect(),
                )
            } else {
                return Err(Error::Config(format!(
                    "spline file holds {} functions for {} hidden layers",
                    splines.len(),
                    n_hidden
                )));
            }
        }
    };
    let iaf = match &cfg.iaf {
        Some(sc) => Some((0..input_dim).map(|_| sc.build()).collect::<Result<Vec<_>>>()?),
        None => None,
    };
    let spec = MlpSpec {
        input_dim,
        hidden: cfg.hidden.clone(),
        output_dim,
        residual: cfg.residual,
        activation,
        iaf,
        spectral_norm: cfg.spectral_norm,
        head: cfg.head,
        init_scale: cfg.init_scale,
    };
    spec.validate()?;
    Ok(spec)
}

/// Output width implied by a task and head.
pub fn output_dim_for(data: &Dataset, head: Head) -> usize {
    match head {
        Head::Logits => data.class_count.max(1),
        Head::Regression => 1,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaSettings {
    pub base: MetaConfig,
    pub grid: Vec<RestartPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    #[serde(default)]
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub meta: Option<MetaSettings>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds list must not be empty".into()));
        }
        self.train.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedRunSummary {
    pub seed: u64,
    pub best_step: usize,
    pub best_val_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub runs: Vec<SeedRunSummary>,
    pub mean_test_acc: f64,
}

fn write_deterministic(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body)?;
    Ok(())
}

/// Train once per seed, writing per-seed metrics CSV, checkpoints, and a
/// strided trajectory for later landscape analysis.
pub fn cmd_train(cfg: &ExperimentConfig, out_dir: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let started = std::time::Instant::now();
    let bundle = resolve_task(&cfg.task, &cfg.split)?;
    let out_dim = output_dim_for(&bundle.data, cfg.model.head);
    let spec = resolve_model(&cfg.model, bundle.data.dims(), out_dim)?;
    write_deterministic(&out_dir.join("config.json"), &serde_json::to_string_pretty(cfg)?)?;

    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let mut tc = cfg.train.clone();
        tc.seed = seed;
        let outcome = train(&spec, &bundle.data, &bundle.splits, &tc)?;
        let test_acc =
            eval_metric(&spec, &outcome.best_params, &bundle.data, &bundle.splits.test, tc.loss)?;
        persist_run(out_dir, seed, &spec, &outcome)?;
        runs.push(SeedRunSummary {
            seed,
            best_step: outcome.best_step,
            best_val_acc: outcome.best_val_acc,
            test_acc,
        });
    }
    let mean_test_acc = runs.iter().map(|r| r.test_acc).sum::<f64>() / runs.len() as f64;
    let summary = TrainSummary { runs, mean_test_acc };
    write_deterministic(&out_dir.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    // wall-clock details live outside the deterministic outputs
    std::fs::write(
        out_dir.join("run_meta.json"),
        format!("{{\"wall_seconds\": {}}}\n", started.elapsed().as_secs_f64()),
    )?;
    Ok(summary)
}

fn persist_run(
    out_dir: &Path,
    seed: u64,
    spec: &MlpSpec,
    outcome: &TrainOutcome,
) -> Result<()> {
    write_deterministic(
        &out_dir.join(format!("metrics_s{seed}.csv")),
        &io::metrics_csv(&outcome.metrics),
    )?;
    Checkpoint::new(spec, &outcome.best_params)
        .save(&out_dir.join(format!("checkpoint_s{seed}.json")))?;
    Checkpoint::new(spec, &outcome.final_params)
        .save(&out_dir.join(format!("checkpoint_final_s{seed}.json")))?;
    // keep at most ~500 snapshots for PCA planes
    let stride = outcome.trajectory.points.len().div_ceil(500).max(1);
    let snaps: Vec<(usize, Vec<f64>)> = outcome
        .trajectory
        .points
        .iter()
        .step_by(stride)
        .map(|p| (p.step, p.params.flatten()))
        .collect();
    write_deterministic(
        &out_dir.join(format!("trajectory_s{seed}.json")),
        &serde_json::to_string(&snaps)?,
    )?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetaSummary {
    pub best_index: usize,
    pub best_retrain_val_acc: f64,
    pub spline_path: PathBuf,
}

/// Restart search over the configured grid; persists the best ψ as spline
/// JSON plus the per-point restart log and the winning run's meta log.
pub fn cmd_meta(cfg: &ExperimentConfig, out_dir: &Path) -> Result<MetaSummary> {
    cfg.validate()?;
    let meta = cfg
        .meta
        .as_ref()
        .ok_or_else(|| Error::Config("meta command needs a meta section in the config".into()))?;
    std::fs::create_dir_all(out_dir)?;
    let bundle = resolve_task(&cfg.task, &cfg.split)?;
    let out_dim = output_dim_for(&bundle.data, cfg.model.head);
    let template = resolve_model(&cfg.model, bundle.data.dims(), out_dim)?;
    let pools = bundle.episode_pools();
    write_deterministic(&out_dir.join("config.json"), &serde_json::to_string_pretty(cfg)?)?;

    let grid = RestartGrid { points: meta.grid.clone() };
    let outcome = restart_search(
        &bundle.data,
        &pools,
        &template,
        &grid,
        &meta.base,
        &cfg.train,
        &bundle.splits,
    )?;

    let mut learned = outcome.spec.clone();
    let splines: Vec<SplineActivation> =
        learned.splines_mut().into_iter().map(|s| s.clone()).collect();
    let spline_path = out_dir.join("spline.json");
    let body = if splines.len() == 1 {
        serde_json::to_string_pretty(&splines[0])?
    } else {
        serde_json::to_string_pretty(&splines)?
    };
    write_deterministic(&spline_path, &body)?;
    write_deterministic(&out_dir.join("restart_log.csv"), &io::restart_log_csv(&outcome.log))?;
    write_deterministic(&out_dir.join("meta_log.csv"), &io::meta_log_csv(&outcome.best_meta_log))?;
    Checkpoint::new(&outcome.spec, &crate::nets::init_params(&outcome.spec, 0))
        .save(&out_dir.join("template.json"))?;
    Ok(MetaSummary {
        best_index: outcome.best_index,
        best_retrain_val_acc: outcome.best_retrain_val_acc,
        spline_path,
    })
}

/// Write generated datasets to disk: synthetic digit IDX files and the
/// staircase CSV, through the same formats the loaders consume.
pub fn cmd_gen_data(out_dir: &Path, rows: usize, seed: u64) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let (images, labels) = gen_synth_digit_images(rows, seed);
    crate::tasks::write_idx_images(&out_dir.join("synth-images.idx3-ubyte"), &images, 28, 28)?;
    crate::tasks::write_idx_labels(&out_dir.join("synth-labels.idx1-ubyte"), &labels)?;
    let staircase = gen_staircase(2, 4, rows, seed)?;
    write_deterministic(&out_dir.join("staircase.csv"), &io::dataset_csv(&staircase))?;
    Ok(())
}

/// Process exit code for an error category: 2 for configuration and data
/// problems, 3 for numerical failures.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Data(_) | Error::Io(_) | Error::Json(_) | Error::ShapeMismatch { .. } => 2,
        Error::Divergence { .. } | Error::Numerical(_) => 3,
    }
}
