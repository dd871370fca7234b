//! Episodic bi-level optimization of the spline activation parameters ψ.
//!
//! Each outer iteration samples a fresh episode (new weight seed, new
//! train/validation subsets), trains the model for a progressively growing
//! number of inner steps with ψ frozen, and updates ψ by one gradient step
//! through the outer objective. Second-order gradients flow only through the
//! last `t` inner updates: those steps' backward passes are recorded on the
//! tape itself, so one numeric backward over the extended graph yields the
//! exact truncated meta-gradient. Weights entering the window are constants.

use crate::autograd::{NodeId, Op, Tape};
use crate::error::{Error, Result};
use crate::nets::{
    forward_graph, init_params, ActivationNodes, MlpSpec, ParamNodes, ParamSet,
};
use crate::splines::{init_spline, SplineInit};
use crate::tasks::Dataset;
use crate::tensor::Tensor;
use crate::training::{eval_metric, target_tensor, LossKind, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EpisodeTag {
    InDistribution,
    Ood,
}

/// One outer-loop trial: a fresh weight seed plus disjoint data subsets.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub weight_seed: u64,
    pub train_rows: Vec<usize>,
    pub val_rows: Vec<usize>,
    pub tag: EpisodeTag,
}

/// Row pools episodes draw from. The OOD pool, when present, supplies the
/// validation rows instead of the in-distribution pool (the collage
/// experiments point it at a tile-specific validation set).
#[derive(Debug, Clone, Default)]
pub struct EpisodePools {
    pub train: Vec<usize>,
    pub ood_val: Option<Vec<usize>>,
    /// Only consulted by the test-cheat objective ablation.
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerParams {
    /// Caps on |T'| and |V|; the defaults are 80%/20% of the pool bounded by
    /// 4096/1024 rows.
    pub train_cap: usize,
    pub val_cap: usize,
}

impl Default for SamplerParams {
    fn default() -> Self {
        SamplerParams { train_cap: 4096, val_cap: 1024 }
    }
}

pub fn sample_episode(
    pools: &EpisodePools,
    params: &SamplerParams,
    tag: EpisodeTag,
    outer_seed: u64,
) -> Result<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(outer_seed);
    let weight_seed: u64 = rng.gen();
    let mut pool = pools.train.clone();
    partial_shuffle(&mut pool, &mut rng);

    let t_size = ((pool.len() * 4) / 5).clamp(1, params.train_cap);
    match tag {
        EpisodeTag::InDistribution => {
            let v_size = (pool.len() - t_size).clamp(1, params.val_cap);
            if t_size + v_size > pool.len() {
                return Err(Error::Data(format!(
                    "episode needs {t_size}+{v_size} rows from a pool of {}",
                    pool.len()
                )));
            }
            Ok(Episode {
                weight_seed,
                train_rows: pool[..t_size].to_vec(),
                val_rows: pool[t_size..t_size + v_size].to_vec(),
                tag,
            })
        }
        EpisodeTag::Ood => {
            let ood = pools
                .ood_val
                .as_ref()
                .ok_or_else(|| Error::Config("ood episodes need a designated OOD pool".into()))?;
            let mut ood = ood.clone();
            partial_shuffle(&mut ood, &mut rng);
            let v_size = ood.len().clamp(1, params.val_cap);
            Ok(Episode {
                weight_seed,
                train_rows: pool[..t_size].to_vec(),
                val_rows: ood[..v_size].to_vec(),
                tag,
            })
        }
    }
}

fn partial_shuffle(v: &mut [usize], rng: &mut ChaCha8Rng) {
    use rand::seq::SliceRandom;
    v.shuffle(rng);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OuterObjective {
    /// Ablation: minimize the loss on the episode's training subset.
    Train,
    /// Default: minimize the loss on held-out validation rows.
    Validation,
    /// Ablation only: minimize the loss on the test split. Refused unless the
    /// config explicitly opts in.
    TestCheat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    /// Maximum outer iterations (the progressive schedule ties inner length
    /// to the outer iteration index).
    pub n_outer_max: usize,
    pub outer_lr: f64,
    /// Number of trailing inner steps second-order gradients flow through.
    pub truncation: usize,
    pub inner_lr: f64,
    /// Ceiling on the progressive inner-step schedule.
    pub inner_step_cap: usize,
    pub objective: OuterObjective,
    pub allow_test_cheat: bool,
    pub sampler: SamplerParams,
    pub episode_tag: EpisodeTag,
    /// Outer iterations without improvement before stopping.
    pub patience: usize,
    pub loss: LossKind,
    pub seed: u64,
}

impl MetaConfig {
    pub fn new(outer_lr: f64, loss: LossKind) -> Self {
        MetaConfig {
            n_outer_max: 100,
            outer_lr,
            truncation: 5,
            inner_lr: 0.1,
            inner_step_cap: 500,
            objective: OuterObjective::Validation,
            allow_test_cheat: false,
            sampler: SamplerParams::default(),
            episode_tag: EpisodeTag::InDistribution,
            patience: 10,
            loss,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.outer_lr < 0.0 || self.inner_lr <= 0.0 {
            return Err(Error::Config("meta learning rates must be positive".into()));
        }
        if self.n_outer_max == 0 {
            return Err(Error::Config("n_outer_max must be at least 1".into()));
        }
        if self.objective == OuterObjective::TestCheat && !self.allow_test_cheat {
            return Err(Error::Config(
                "the test-cheat objective is an ablation and must be explicitly enabled".into(),
            ));
        }
        Ok(())
    }
}

/// Rows the outer objective is evaluated on.
pub fn outer_objective_rows<'a>(
    episode: &'a Episode,
    pools: &'a EpisodePools,
    objective: OuterObjective,
    allow_test_cheat: bool,
) -> Result<&'a [usize]> {
    let rows: &[usize] = match objective {
        OuterObjective::Train => &episode.train_rows,
        OuterObjective::Validation => &episode.val_rows,
        OuterObjective::TestCheat => {
            if !allow_test_cheat {
                return Err(Error::Config(
                    "the test-cheat objective is an ablation and must be explicitly enabled".into(),
                ));
            }
            &pools.test
        }
    };
    if rows.is_empty() {
        return Err(Error::Data("outer objective has no rows to evaluate on".into()));
    }
    Ok(rows)
}

/// Result of one unrolled window: the meta-gradients for every learnable ψ
/// leaf (hidden splines first, then IAFs), the weights after the window, and
/// the losses seen along the way.
#[derive(Debug)]
pub struct WindowResult {
    pub psi_grads: Vec<Tensor>,
    pub final_params: ParamSet,
    pub outer_loss: f64,
    pub inner_losses: Vec<f64>,
}

fn loss_node(tape: &mut Tape, kind: LossKind, pred: NodeId, target: NodeId) -> Result<NodeId> {
    match kind {
        LossKind::Mse => tape.push(Op::Mse(pred, target)),
        LossKind::SoftmaxCe => tape.push(Op::SoftmaxCe(pred, target)),
    }
}

/// Differentiate the outer loss with respect to ψ through the last
/// `window` gradient-descent steps. Weights entering the window are
/// constants: gradients do not flow further back.
pub fn unrolled_meta_gradient(
    spec: &MlpSpec,
    theta_entry: &ParamSet,
    data: &Dataset,
    inner_rows: &[usize],
    outer_rows: &[usize],
    window: usize,
    inner_lr: f64,
    loss: LossKind,
) -> Result<WindowResult> {
    let mut tape = Tape::new();
    let acts = ActivationNodes::build(&mut tape, spec, true)?;
    let psi_before: Vec<Vec<f64>> =
        acts.psi_leaves.iter().map(|&id| tape.value(id).data.clone()).collect();

    let x_in = tape.constant(data.gather_x(inner_rows));
    let t_in = tape.constant(target_tensor(data, inner_rows, spec.head)?);

    let mut theta = ParamNodes {
        weights: theta_entry.weights.iter().map(|w| tape.leaf(w.clone(), false)).collect(),
        biases: theta_entry.biases.iter().map(|b| tape.leaf(b.clone(), false)).collect(),
    };

    let mut inner_losses = Vec::with_capacity(window);
    for _ in 0..window {
        let out = forward_graph(&mut tape, spec, &theta, &acts, x_in)?;
        let l = loss_node(&mut tape, loss, out, t_in)?;
        let lv = tape.value(l).item();
        if !lv.is_finite() {
            return Err(Error::Divergence { step: inner_losses.len() + 1 });
        }
        inner_losses.push(lv);
        let wrt = theta.all();
        let grads = tape.grad_nodes(l, &wrt)?;
        let mut next = Vec::with_capacity(wrt.len());
        for (&p, &g) in wrt.iter().zip(&grads) {
            let step = tape.push(Op::Scale(g, inner_lr))?;
            next.push(tape.push(Op::Sub(p, step))?);
        }
        let n_w = theta.weights.len();
        theta = ParamNodes { weights: next[..n_w].to_vec(), biases: next[n_w..].to_vec() };
    }

    let x_out = tape.constant(data.gather_x(outer_rows));
    let t_out = tape.constant(target_tensor(data, outer_rows, spec.head)?);
    let pred = forward_graph(&mut tape, spec, &theta, &acts, x_out)?;
    let outer = loss_node(&mut tape, loss, pred, t_out)?;
    let outer_loss = tape.value(outer).item();
    if !outer_loss.is_finite() {
        return Err(Error::Divergence { step: window + 1 });
    }

    let grads = tape.backward(outer, &Tensor::scalar(1.0))?;
    let psi_grads = acts.psi_leaves.iter().map(|&id| grads.get(id, &tape)).collect();

    // ψ must stay frozen through the whole inner loop
    for (&id, before) in acts.psi_leaves.iter().zip(&psi_before) {
        debug_assert_eq!(&tape.value(id).data, before, "psi changed inside the inner loop");
    }

    let final_params = ParamSet {
        weights: theta.weights.iter().map(|&id| tape.value(id).clone()).collect(),
        biases: theta.biases.iter().map(|&id| tape.value(id).clone()).collect(),
    };
    Ok(WindowResult { psi_grads, final_params, outer_loss, inner_losses })
}

/// Plain (first-order, untracked) gradient-descent steps used before the
/// differentiated window.
fn detached_inner_steps(
    spec: &MlpSpec,
    params: &mut ParamSet,
    data: &Dataset,
    rows: &[usize],
    steps: usize,
    inner_lr: f64,
    loss: LossKind,
) -> Result<()> {
    for step in 0..steps {
        let mut tape = Tape::new();
        let acts = ActivationNodes::build(&mut tape, spec, false)?;
        let x = tape.constant(data.gather_x(rows));
        let t = tape.constant(target_tensor(data, rows, spec.head)?);
        let pids = ParamNodes::leaves(&mut tape, params, true);
        let out = forward_graph(&mut tape, spec, &pids, &acts, x)?;
        let l = loss_node(&mut tape, loss, out, t)?;
        if !tape.value(l).item().is_finite() {
            return Err(Error::Divergence { step: step + 1 });
        }
        let grads = tape.backward(l, &Tensor::scalar(1.0))?;
        for (p, id) in params
            .weights
            .iter_mut()
            .chain(params.biases.iter_mut())
            .zip(pids.all())
        {
            let g = grads.get(id, &tape);
            for (pv, gv) in p.data.iter_mut().zip(&g.data) {
                *pv -= inner_lr * gv;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetaLogRow {
    pub outer_step: usize,
    pub n_tr: usize,
    pub episode_seed: u64,
    pub outer_loss: f64,
    pub retrain_val_acc: f64,
}

#[derive(Debug, Clone)]
pub struct MetaOutcome {
    /// The spec with the best-performing ψ written back into its splines.
    pub spec: MlpSpec,
    pub best_val_acc: f64,
    pub log: Vec<MetaLogRow>,
    pub discarded_episodes: usize,
}

/// Algorithm: train the activation function. Outer iteration k retrains the
/// model from scratch for min(k, cap) inner steps on a fresh episode, then
/// takes one ψ step through the truncated window. Returns the ψ with the
/// best episode validation metric.
pub fn meta_learn(
    data: &Dataset,
    pools: &EpisodePools,
    template: &MlpSpec,
    cfg: &MetaConfig,
) -> Result<MetaOutcome> {
    cfg.validate()?;
    template.validate()?;
    let mut spec = template.clone();
    if spec.splines_mut().is_empty() {
        return Err(Error::Config("meta-learning needs at least one spline activation".into()));
    }

    // Selection and patience track the retrained-model validation accuracy
    // first and fall back to the outer loss while accuracy sits at chance
    // (accuracy carries no signal during the early progressive schedule).
    let mut best: Option<(f64, f64, Vec<Vec<f64>>)> = None;
    let mut log = Vec::new();
    let mut discarded = 0usize;
    let mut attempted = 0usize;
    let mut stale = 0usize;

    for outer_step in 1..=cfg.n_outer_max {
        let n_tr = outer_step.min(cfg.inner_step_cap);
        let episode_seed = cfg.seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(outer_step as u64);
        let episode = sample_episode(pools, &cfg.sampler, cfg.episode_tag, episode_seed)?;
        let outer_rows =
            outer_objective_rows(&episode, pools, cfg.objective, cfg.allow_test_cheat)?.to_vec();

        attempted += 1;
        let window = cfg.truncation.min(n_tr);
        let mut theta = init_params(&spec, episode.weight_seed);
        let psi_now: Vec<Vec<f64>> = spec
            .splines_mut()
            .iter()
            .map(|s| s.psi.clone())
            .collect();

        let run = detached_inner_steps(
            &spec,
            &mut theta,
            data,
            &episode.train_rows,
            n_tr - window,
            cfg.inner_lr,
            cfg.loss,
        )
        .and_then(|()| {
            unrolled_meta_gradient(
                &spec,
                &theta,
                data,
                &episode.train_rows,
                &outer_rows,
                window,
                cfg.inner_lr,
                cfg.loss,
            )
        });

        let result = match run {
            Ok(r) => r,
            Err(Error::Divergence { .. }) => {
                discarded += 1;
                if attempted >= 8 && discarded * 4 > attempted {
                    return Err(Error::Numerical(format!(
                        "{discarded} of {attempted} episodes diverged; inner lr {} looks unstable",
                        cfg.inner_lr
                    )));
                }
                continue;
            }
            Err(e) => return Err(e),
        };

        // this episode's retrained-from-scratch model, scored on its V
        let retrain_val_acc =
            eval_metric(&spec, &result.final_params, data, &episode.val_rows, cfg.loss)?;
        log.push(MetaLogRow {
            outer_step,
            n_tr,
            episode_seed,
            outer_loss: result.outer_loss,
            retrain_val_acc,
        });

        let improved = match &best {
            Some((acc, loss, _)) => {
                retrain_val_acc > *acc
                    || (retrain_val_acc == *acc && result.outer_loss < *loss)
            }
            None => true,
        };
        if improved {
            best = Some((retrain_val_acc, result.outer_loss, psi_now));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }

        // ψ step
        let mut grad_iter = result.psi_grads.iter();
        for s in spec.splines_mut() {
            let g = grad_iter.next().expect("one gradient per learnable spline");
            for (p, gv) in s.psi.iter_mut().zip(&g.data) {
                *p -= cfg.outer_lr * gv;
            }
        }
    }

    let (best_val_acc, _, best_psi) = best.ok_or_else(|| {
        Error::Numerical("every meta-learning episode diverged".into())
    })?;
    let mut grad_iter = best_psi.into_iter();
    for s in spec.splines_mut() {
        s.psi = grad_iter.next().expect("one psi per learnable spline");
    }
    Ok(MetaOutcome { spec, best_val_acc, log, discarded_episodes: discarded })
}

/// One point of the restart grid: seed, outer learning rate, control-point
/// count and truncation for the hidden splines, and their initialization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RestartPoint {
    pub seed: u64,
    pub outer_lr: f64,
    pub n_c: usize,
    pub truncation: usize,
    pub init: SplineInit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartGrid {
    pub points: Vec<RestartPoint>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RestartLogRow {
    pub index: usize,
    pub point: RestartPoint,
    pub retrain_val_acc: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone)]
pub struct RestartOutcome {
    pub spec: MlpSpec,
    pub best_index: usize,
    pub best_retrain_val_acc: f64,
    pub log: Vec<RestartLogRow>,
    /// The winning grid point's outer-loop log.
    pub best_meta_log: Vec<MetaLogRow>,
}

/// Apply one restart point to the template: hidden splines are re-gridded and
/// re-initialized; input activation functions keep their own grid and restart
/// from the identity.
fn configure_template(template: &MlpSpec, point: &RestartPoint) -> Result<MlpSpec> {
    let mut spec = template.clone();
    let n_hidden_splines = spec.activation.splines_mut().len();
    for (i, s) in spec.splines_mut().into_iter().enumerate() {
        let fresh = if i < n_hidden_splines {
            init_spline(point.init, point.n_c, s.a, s.b)?
        } else {
            init_spline(SplineInit::Identity, s.n_c, s.a, s.b)?
        };
        let mode = s.mode;
        *s = fresh.with_mode(mode);
    }
    Ok(spec)
}

/// Vanilla gradient descent with restarts: run the meta-learner once per grid
/// point, retrain a model from scratch with each candidate ψ held fixed, and
/// keep the candidate with the best validation accuracy (ties keep the first
/// grid point).
pub fn restart_search(
    data: &Dataset,
    pools: &EpisodePools,
    template: &MlpSpec,
    grid: &RestartGrid,
    cfg: &MetaConfig,
    retrain: &TrainConfig,
    retrain_splits: &crate::tasks::SplitSpec,
) -> Result<RestartOutcome> {
    if grid.points.is_empty() {
        return Err(Error::Config("restart grid is empty".into()));
    }
    type PointResult = (MlpSpec, f64, bool, Vec<MetaLogRow>);
    let results: Vec<Result<PointResult>> = grid
        .points
        .par_iter()
        .map(|point| {
            let spec = configure_template(template, point)?;
            let mut point_cfg = cfg.clone();
            point_cfg.seed = point.seed;
            point_cfg.outer_lr = point.outer_lr;
            point_cfg.truncation = point.truncation;
            match meta_learn(data, pools, &spec, &point_cfg) {
                Ok(outcome) => {
                    let trained = crate::training::train(&outcome.spec, data, retrain_splits, retrain)?;
                    let acc = eval_metric(
                        &outcome.spec,
                        &trained.best_params,
                        data,
                        &retrain_splits.val,
                        retrain.loss,
                    )?;
                    Ok((outcome.spec, acc, false, outcome.log))
                }
                Err(Error::Numerical(_)) | Err(Error::Divergence { .. }) => {
                    Ok((spec, f64::NEG_INFINITY, true, Vec::new()))
                }
                Err(e) => Err(e),
            }
        })
        .collect();

    let mut log = Vec::new();
    let mut best: Option<(usize, f64, MlpSpec, Vec<MetaLogRow>)> = None;
    for (index, result) in results.into_iter().enumerate() {
        let (spec, acc, diverged, meta_log) = result?;
        log.push(RestartLogRow {
            index,
            point: grid.points[index],
            retrain_val_acc: acc,
            diverged,
        });
        if !diverged {
            let better = match &best {
                Some((_, best_acc, _, _)) => acc > *best_acc,
                None => true,
            };
            if better {
                best = Some((index, acc, spec, meta_log));
            }
        }
    }
    let (best_index, best_retrain_val_acc, spec, best_meta_log) = best
        .ok_or_else(|| Error::Numerical("every restart-grid candidate diverged".into()))?;
    Ok(RestartOutcome { spec, best_index, best_retrain_val_acc, log, best_meta_log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::Head;
    use crate::splines::{ActKind, ActivationBinding, GridPos, SplineActivation, SplineMeta};
    use crate::tasks::{gen_abs_regression, Targets};

    fn spline_mlp(n_c: usize) -> MlpSpec {
        MlpSpec {
            input_dim: 4,
            hidden: vec![4],
            output_dim: 1,
            residual: false,
            activation: ActivationBinding::Shared(ActKind::Spline(
                init_spline(SplineInit::Relu, n_c, -5.0, 5.0).unwrap(),
            )),
            iaf: None,
            spectral_norm: false,
            head: Head::Regression,
            init_scale: 1.0,
        }
    }

    fn toy_regression_data(rows: usize, dims: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Tensor::zeros(rows, dims);
        let mut y = Vec::with_capacity(rows);
        for r in 0..rows {
            let mut s = 0.0;
            for c in 0..dims {
                let v: f64 = rng.gen_range(-1.5..1.5);
                x.data[r * dims + c] = v;
                s += v;
            }
            y.push((2.0 * s).sin());
        }
        Dataset { x, targets: Targets::Values(y), class_count: 0, provenance: "toy".into() }
    }

    /// Finite differences over ψ with the same truncation: the window is
    /// rebuilt from the identical entry weights for every perturbation.
    fn meta_grad_fd(
        spec: &MlpSpec,
        theta_entry: &ParamSet,
        data: &Dataset,
        inner_rows: &[usize],
        outer_rows: &[usize],
        window: usize,
        inner_lr: f64,
        eps: f64,
    ) -> Vec<Tensor> {
        let n_splines = spec.clone().splines_mut().len();
        let mut grads = Vec::new();
        for k in 0..n_splines {
            let n = spec.clone().splines_mut()[k].psi.len();
            let mut g = Tensor::zeros(1, n);
            for j in 0..n {
                let mut run = |delta: f64| -> f64 {
                    let mut pert = spec.clone();
                    pert.splines_mut()[k].psi[j] += delta;
                    unrolled_meta_gradient(
                        &pert, theta_entry, data, inner_rows, outer_rows, window, inner_lr,
                        LossKind::Mse,
                    )
                    .unwrap()
                    .outer_loss
                };
                g.data[j] = (run(eps) - run(-eps)) / (2.0 * eps);
            }
            grads.push(g);
        }
        grads
    }

    #[test]
    fn truncated_meta_gradient_matches_finite_differences() {
        let spec = spline_mlp(20);
        let data = toy_regression_data(24, 4, 5);
        let inner_rows: Vec<usize> = (0..16).collect();
        let outer_rows: Vec<usize> = (16..24).collect();
        let theta = init_params(&spec, 3);
        for window in [1usize, 2, 3] {
            let result = unrolled_meta_gradient(
                &spec, &theta, &data, &inner_rows, &outer_rows, window, 0.05, LossKind::Mse,
            )
            .unwrap();
            let fd = meta_grad_fd(&spec, &theta, &data, &inner_rows, &outer_rows, window, 0.05, 1e-4);
            for (an, num) in result.psi_grads.iter().zip(&fd) {
                let mut max_rel: f64 = 0.0;
                for (a, b) in an.data.iter().zip(&num.data) {
                    let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
                    max_rel = max_rel.max(rel);
                }
                assert!(max_rel <= 1e-3, "window {window}: max rel err {max_rel}");
            }
        }
    }

    #[test]
    fn zero_window_reduces_to_plain_psi_backward() {
        let spec = spline_mlp(12);
        let data = toy_regression_data(12, 4, 7);
        let rows: Vec<usize> = (0..12).collect();
        let theta = init_params(&spec, 1);
        let meta = unrolled_meta_gradient(
            &spec, &theta, &data, &rows, &rows, 0, 0.05, LossKind::Mse,
        )
        .unwrap();

        // plain backward of the validation loss with θ held fixed
        let mut tape = Tape::new();
        let acts = ActivationNodes::build(&mut tape, &spec, true).unwrap();
        let pids = ParamNodes::leaves(&mut tape, &theta, false);
        let x = tape.constant(data.gather_x(&rows));
        let t = tape.constant(target_tensor(&data, &rows, spec.head).unwrap());
        let pred = forward_graph(&mut tape, &spec, &pids, &acts, x).unwrap();
        let l = tape.push(Op::Mse(pred, t)).unwrap();
        let grads = tape.backward(l, &Tensor::scalar(1.0)).unwrap();
        for (&id, mg) in acts.psi_leaves.iter().zip(&meta.psi_grads) {
            assert_eq!(grads.get(id, &tape).data, mg.data);
        }
    }

    /// Barycentric weight vector dg/dψ at a sample, for the analytic check.
    fn weights_at(meta: &SplineMeta, x: f64) -> Vec<f64> {
        let mut w = vec![0.0; meta.n_c];
        match meta.locate(x) {
            GridPos::Below => w[0] = 1.0,
            GridPos::Above => w[meta.n_c - 1] = 1.0,
            GridPos::Cell { i, u } => {
                w[i] = 1.0 - u;
                w[i + 1] = u;
            }
        }
        w
    }

    #[test]
    fn one_step_meta_gradient_matches_closed_form() {
        // scalar model: pred = w·g(x) + c, one GD step on one example,
        // quadratic loss; the meta-gradient has a hand-derivable form.
        let spline = SplineActivation {
            n_c: 6,
            a: -2.0,
            b: 2.0,
            mode: crate::splines::InterpMode::Linear,
            psi: vec![0.3, -0.4, 0.8, 0.1, -0.2, 0.6],
        };
        let meta = spline.meta();
        let spec = MlpSpec {
            input_dim: 1,
            hidden: vec![],
            output_dim: 1,
            residual: false,
            activation: ActivationBinding::Shared(ActKind::Relu),
            iaf: Some(vec![spline.clone()]),
            spectral_norm: false,
            head: Head::Regression,
            init_scale: 1.0,
        };
        let (x0, y0, xv, yv) = (0.37, 0.9, -1.21, -0.4);
        let data = Dataset {
            x: Tensor::from_rows(&[vec![x0], vec![xv]]),
            targets: Targets::Values(vec![y0, yv]),
            class_count: 0,
            provenance: "analytic".into(),
        };
        let theta = init_params(&spec, 11);
        let (w0, c0) = (theta.weights[0].data[0], theta.biases[0].data[0]);
        let eta = 0.07;

        let result = unrolled_meta_gradient(
            &spec, &theta, &data, &[0], &[1], 1, eta, LossKind::Mse,
        )
        .unwrap();

        let u = weights_at(&meta, x0);
        let v = weights_at(&meta, xv);
        let a: f64 = u.iter().zip(&spline.psi).map(|(u, p)| u * p).sum();
        let av: f64 = v.iter().zip(&spline.psi).map(|(v, p)| v * p).sum();
        let r = w0 * a + c0 - y0;
        let w1 = w0 - 2.0 * eta * r * a;
        let c1 = c0 - 2.0 * eta * r;
        let rv = w1 * av + c1 - yv;
        for j in 0..meta.n_c {
            let dw1 = -2.0 * eta * u[j] * (w0 * a + r);
            let dc1 = -2.0 * eta * w0 * u[j];
            let expected = 2.0 * rv * (dw1 * av + w1 * v[j] + dc1);
            let got = result.psi_grads[0].data[j];
            let rel = (got - expected).abs() / expected.abs().max(got.abs()).max(1e-12);
            assert!(rel <= 1e-8, "psi[{j}]: analytic {expected}, got {got}");
        }
    }

    #[test]
    fn episodes_vary_and_are_deterministic() {
        let pools = EpisodePools { train: (0..200).collect(), ood_val: None, test: vec![] };
        let params = SamplerParams { train_cap: 100, val_cap: 50 };
        let e1 = sample_episode(&pools, &params, EpisodeTag::InDistribution, 1).unwrap();
        let e2 = sample_episode(&pools, &params, EpisodeTag::InDistribution, 2).unwrap();
        assert_ne!(e1.weight_seed, e2.weight_seed);
        assert_eq!(e1, sample_episode(&pools, &params, EpisodeTag::InDistribution, 1).unwrap());
        assert_eq!(e1.train_rows.len(), 100);
        assert_eq!(e1.val_rows.len(), 50);
        let overlap = e1.train_rows.iter().filter(|i| e1.val_rows.contains(i)).count();
        assert_eq!(overlap, 0);

        // the OOD tag draws validation rows from the designated pool only
        let pools = EpisodePools {
            train: (0..100).collect(),
            ood_val: Some((1000..1050).collect()),
            test: vec![],
        };
        let e = sample_episode(&pools, &params, EpisodeTag::Ood, 3).unwrap();
        assert!(e.val_rows.iter().all(|&i| (1000..1050).contains(&i)));
    }

    #[test]
    fn test_cheat_objective_requires_opt_in() {
        let mut cfg = MetaConfig::new(0.1, LossKind::Mse);
        cfg.objective = OuterObjective::TestCheat;
        assert!(cfg.validate().is_err());
        cfg.allow_test_cheat = true;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn zero_outer_lr_returns_the_initialization() {
        let data = toy_regression_data(60, 4, 2);
        let pools = EpisodePools { train: (0..60).collect(), ood_val: None, test: vec![] };
        let template = spline_mlp(10);
        let mut cfg = MetaConfig::new(0.0, LossKind::Mse);
        cfg.n_outer_max = 6;
        cfg.inner_lr = 0.05;
        cfg.sampler = SamplerParams { train_cap: 40, val_cap: 10 };
        let out = meta_learn(&data, &pools, &template, &cfg).unwrap();
        let mut got = out.spec.clone();
        let mut want = template.clone();
        assert_eq!(got.splines_mut()[0].psi, want.splines_mut()[0].psi);
    }

    #[test]
    fn meta_learned_iaf_discovers_the_abs_kink() {
        // 1D regression y = |x| with a zero-initialized input activation on a
        // linear model: the learned activation must pick up the V shape.
        let data = gen_abs_regression(320, 9);
        let pools = EpisodePools { train: (0..data.rows()).collect(), ood_val: None, test: vec![] };
        let iaf = init_spline(SplineInit::Zeros, 21, -2.5, 2.5).unwrap();
        let template = MlpSpec {
            input_dim: 1,
            hidden: vec![],
            output_dim: 1,
            residual: false,
            activation: ActivationBinding::Shared(ActKind::Relu),
            iaf: Some(vec![iaf]),
            spectral_norm: false,
            head: Head::Regression,
            init_scale: 1.0,
        };
        let mut cfg = MetaConfig::new(0.5, LossKind::Mse);
        cfg.n_outer_max = 300;
        cfg.inner_lr = 0.3;
        cfg.truncation = 5;
        cfg.inner_step_cap = 60;
        cfg.patience = 60;
        cfg.sampler = SamplerParams { train_cap: 240, val_cap: 64 };
        cfg.seed = 4;
        let out = meta_learn(&data, &pools, &template, &cfg).unwrap();

        let mut learned_spec = out.spec.clone();
        let learned = learned_spec.splines_mut().pop().unwrap().clone();
        let mut xs = Vec::new();
        let mut f = Vec::new();
        let mut target = Vec::new();
        let mut x = -2.0;
        while x <= 2.0 {
            xs.push(x);
            f.push(learned.eval(x));
            target.push(x.abs());
            x += 0.05;
        }
        let r = pearson(&f, &target);
        assert!(r.abs() >= 0.9, "learned activation correlates only r={r}");
        let _ = xs;
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let mut cov = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for (x, y) in a.iter().zip(b) {
            cov += (x - ma) * (y - mb);
            va += (x - ma) * (x - ma);
            vb += (y - mb) * (y - mb);
        }
        cov / (va.sqrt() * vb.sqrt()).max(1e-12)
    }

    #[test]
    fn episode_inner_trajectory_is_a_pure_function_of_psi_and_episode() {
        let data = toy_regression_data(40, 4, 13);
        let spec = spline_mlp(8);
        let episode = Episode {
            weight_seed: 77,
            train_rows: (0..30).collect(),
            val_rows: (30..40).collect(),
            tag: EpisodeTag::InDistribution,
        };
        let run = || {
            let theta = init_params(&spec, episode.weight_seed);
            unrolled_meta_gradient(
                &spec, &theta, &data, &episode.train_rows, &episode.val_rows, 3, 0.05,
                LossKind::Mse,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.outer_loss, b.outer_loss);
        assert_eq!(a.inner_losses, b.inner_losses);
        for (x, y) in a.final_params.weights.iter().zip(&b.final_params.weights) {
            assert_eq!(x.data, y.data);
        }
    }
}
