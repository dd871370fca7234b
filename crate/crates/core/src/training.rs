//! Supervised inner-loop training: gradient descent or RMSprop on the tape
//! gradients, best-checkpoint selection by validation accuracy, stochastic
//! weight averaging over the trailing steps, and trajectory recording.

use crate::autograd::{Op, Tape};
use crate::error::{Error, Result};
use crate::nets::{forward_graph, init_params, ActivationNodes, Head, MlpSpec, ParamNodes, ParamSet};
use crate::tasks::{Dataset, SplitSpec, Targets};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Gd,
    /// Decay 0.99, epsilon 1e-8.
    Rmsprop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Mse,
    SoftmaxCe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SnapshotPolicy {
    /// Every step up to 5000 steps, then strided so at most ~5000 snapshots
    /// are kept.
    Auto,
    /// Record every n-th step (and the last).
    Stride(usize),
}

impl SnapshotPolicy {
    pub fn stride(&self, max_steps: usize) -> usize {
        match *self {
            SnapshotPolicy::Auto => {
                if max_steps <= 5000 {
                    1
                } else {
                    max_steps.div_ceil(5000)
                }
            }
            SnapshotPolicy::Stride(n) => n.max(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub lr: f64,
    /// None: 4096 examples, or the full training split if smaller.
    pub batch_size: Option<usize>,
    pub max_steps: usize,
    /// Trailing window for stochastic weight averaging; 0 disables it.
    pub swa_window: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub snapshot: SnapshotPolicy,
}

impl TrainConfig {
    pub fn new(optimizer: Optimizer, lr: f64, max_steps: usize, loss: LossKind) -> Self {
        TrainConfig {
            optimizer,
            lr,
            batch_size: None,
            max_steps,
            swa_window: 50,
            seed: 0,
            loss,
            snapshot: SnapshotPolicy::Auto,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        Ok(())
    }
}

/// One recorded step: the raw (pre-averaging) parameters, the minibatch
/// training loss, and the validation metric of the evaluation-time weights.
#[derive(Debug, Clone)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub params: ParamSet,
    pub train_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Elementwise mean of the last `window` snapshots (all of them if fewer).
pub fn swa_average(trajectory: &Trajectory, window: usize) -> Result<ParamSet> {
    if trajectory.points.is_empty() {
        return Err(Error::Config("cannot average an empty trajectory".into()));
    }
    let take = window.max(1).min(trajectory.points.len());
    let slice = &trajectory.points[trajectory.points.len() - take..];
    Ok(mean_params(slice.iter().map(|p| &p.params)))
}

fn mean_params<'a>(sets: impl Iterator<Item = &'a ParamSet> + Clone) -> ParamSet {
    let count = sets.clone().count() as f64;
    let mut iter = sets;
    let first = iter.next().expect("nonempty");
    let mut acc = first.clone();
    for ps in iter {
        for (a, w) in acc.weights.iter_mut().zip(&ps.weights) {
            a.add_assign(w);
        }
        for (a, b) in acc.biases.iter_mut().zip(&ps.biases) {
            a.add_assign(b);
        }
    }
    for w in &mut acc.weights {
        w.scale_assign(1.0 / count);
    }
    for b in &mut acc.biases {
        b.scale_assign(1.0 / count);
    }
    acc
}

#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub step: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Raw parameters after the last step.
    pub final_params: ParamSet,
    /// Evaluation-time parameters at the best recorded validation metric
    /// (weight-averaged when SWA is enabled).
    pub best_params: ParamSet,
    pub best_step: usize,
    pub best_val_acc: f64,
    pub trajectory: Trajectory,
    pub metrics: Vec<MetricsRow>,
}

/// Scalar loss between predictions and targets.
pub fn loss_value(kind: LossKind, pred: &Tensor, targets: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let t = tape.constant(targets.clone());
    let l = match kind {
        LossKind::Mse => tape.push(Op::Mse(p, t))?,
        LossKind::SoftmaxCe => tape.push(Op::SoftmaxCe(p, t))?,
    };
    Ok(tape.value(l).item())
}

/// Argmax class per row, ties toward the lower index.
pub fn argmax_classes(pred: &Tensor) -> Vec<usize> {
    (0..pred.rows)
        .map(|r| {
            let row = &pred.data[r * pred.cols..(r + 1) * pred.cols];
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Nearest class anchor per scalar prediction; ties toward the lower index.
pub fn nearest_anchor(v: f64, anchors: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = (v - anchors[0]).abs();
    for (i, &a) in anchors.iter().enumerate().skip(1) {
        let d = (v - a).abs();
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Fraction of rows classified correctly. Logits heads use the argmax;
/// regression heads snap predictions (and targets) to the nearest class
/// anchor.
pub fn accuracy(head: Head, pred: &Tensor, ds: &Dataset, rows: &[usize]) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::Data("accuracy over an empty row set".into()));
    }
    let hits = match head {
        Head::Logits => {
            let classes = argmax_classes(pred);
            rows.iter()
                .enumerate()
                .filter(|&(i, &row)| ds.class_of(row) == Some(classes[i]))
                .count()
        }
        Head::Regression => {
            let anchors = ds
                .anchors()
                .ok_or_else(|| Error::Config("regression accuracy needs class anchors".into()))?;
            rows.iter()
                .enumerate()
                .filter(|&(i, &row)| {
                    let predicted = nearest_anchor(pred.data[i], &anchors);
                    let truth = nearest_anchor(ds.value_of(row), &anchors);
                    predicted == truth
                })
                .count()
        }
    };
    Ok(hits as f64 / rows.len() as f64)
}

/// Target tensor for a row subset: one-hot classes for logits heads, scalar
/// columns for regression heads.
pub fn target_tensor(ds: &Dataset, rows: &[usize], head: Head) -> Result<Tensor> {
    match head {
        Head::Logits => {
            let mut t = Tensor::zeros(rows.len(), ds.class_count);
            for (i, &row) in rows.iter().enumerate() {
                let c = ds
                    .class_of(row)
                    .ok_or_else(|| Error::Data("logits head needs class targets".into()))?;
                *t.at_mut(i, c) = 1.0;
            }
            Ok(t)
        }
        Head::Regression => {
            let mut t = Tensor::zeros(rows.len(), 1);
            for (i, &row) in rows.iter().enumerate() {
                t.data[i] = ds.value_of(row);
            }
            Ok(t)
        }
    }
}

/// Model quality on a row subset: classification (or class-anchored
/// regression) accuracy when class structure exists, otherwise the negated
/// loss so that higher is still better.
pub fn eval_metric(spec: &MlpSpec, params: &ParamSet, ds: &Dataset, rows: &[usize], loss: LossKind) -> Result<f64> {
    if rows.is_empty() {
        return Ok(f64::NAN);
    }
    let x = ds.gather_x(rows);
    let pred = crate::nets::eval(spec, params, &x)?;
    let has_classes = match ds.targets {
        Targets::Classes(_) => true,
        Targets::Values(_) => ds.class_count >= 2,
    };
    if has_classes {
        accuracy(spec.head, &pred, ds, rows)
    } else {
        let t = target_tensor(ds, rows, spec.head)?;
        Ok(-loss_value(loss, &pred, &t)?)
    }
}

struct OptimizerState {
    kind: Optimizer,
    /// RMSprop running second moments, one per parameter tensor.
    v: Vec<Tensor>,
}

impl OptimizerState {
    fn new(kind: Optimizer, params: &ParamSet) -> Self {
        let v = match kind {
            Optimizer::Gd => Vec::new(),
            Optimizer::Rmsprop => params
                .weights
                .iter()
                .chain(params.biases.iter())
                .map(|t| Tensor::zeros(t.rows, t.cols))
                .collect(),
        };
        OptimizerState { kind, v }
    }

    fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) {
        const DECAY: f64 = 0.99;
        const EPS: f64 = 1e-8;
        let targets = params.weights.iter_mut().chain(params.biases.iter_mut());
        match self.kind {
            Optimizer::Gd => {
                for (p, g) in targets.zip(grads) {
                    for (pv, gv) in p.data.iter_mut().zip(&g.data) {
                        *pv -= lr * gv;
                    }
                }
            }
            Optimizer::Rmsprop => {
                for ((p, g), v) in targets.zip(grads).zip(self.v.iter_mut()) {
                    for ((pv, gv), vv) in p.data.iter_mut().zip(&g.data).zip(&mut v.data) {
                        *vv = DECAY * *vv + (1.0 - DECAY) * gv * gv;
                        *pv -= lr * gv / (vv.sqrt() + EPS);
                    }
                }
            }
        }
    }
}

fn minibatch_order(train: &[usize], batch: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if batch >= train.len() {
        // full batch: fixed natural order regardless of the shuffling seed
        train.to_vec()
    } else {
        let mut order = train.to_vec();
        order.shuffle(rng);
        order
    }
}

/// Train the model with the activation functions fixed inside the spec.
/// Records the trajectory at the snapshot cadence, selects the best recorded
/// checkpoint by validation metric, and applies SWA to the evaluation-time
/// weights when enabled.
pub fn train(
    spec: &MlpSpec,
    data: &Dataset,
    splits: &SplitSpec,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    spec.validate()?;
    splits.validate(data.rows())?;
    if splits.train.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }

    let mut params = init_params(spec, cfg.seed);
    let mut opt = OptimizerState::new(cfg.optimizer, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed);
    let batch = cfg.batch_size.unwrap_or(4096).min(splits.train.len()).max(1);
    let stride = cfg.snapshot.stride(cfg.max_steps);

    let mut swa_ring: VecDeque<ParamSet> = VecDeque::new();
    let mut order = minibatch_order(&splits.train, batch, &mut rng);
    let mut cursor = 0usize;

    let mut trajectory = Trajectory::default();
    let mut metrics = Vec::new();
    let mut best: Option<(usize, f64, ParamSet)> = None;

    for step in 1..=cfg.max_steps {
        if cursor + batch > order.len() {
            order = minibatch_order(&splits.train, batch, &mut rng);
            cursor = 0;
        }
        let rows = &order[cursor..cursor + batch];
        cursor += batch;

        let x = data.gather_x(rows);
        let t = target_tensor(data, rows, spec.head)?;

        let mut tape = Tape::new();
        let xid = tape.constant(x);
        let tid = tape.constant(t);
        let acts = ActivationNodes::build(&mut tape, spec, false)?;
        let pids = ParamNodes::leaves(&mut tape, &params, true);
        let out = forward_graph(&mut tape, spec, &pids, &acts, xid)?;
        let loss_id = match cfg.loss {
            LossKind::Mse => tape.push(Op::Mse(out, tid))?,
            LossKind::SoftmaxCe => tape.push(Op::SoftmaxCe(out, tid))?,
        };
        let train_loss = tape.value(loss_id).item();
        if !train_loss.is_finite() {
            return Err(Error::Divergence { step });
        }

        let grads = tape.backward(loss_id, &Tensor::scalar(1.0))?;
        let grad_tensors: Vec<Tensor> =
            pids.all().iter().map(|&id| grads.get(id, &tape)).collect();
        opt.step(&mut params, &grad_tensors, cfg.lr);

        if cfg.swa_window > 0 {
            swa_ring.push_back(params.clone());
            if swa_ring.len() > cfg.swa_window {
                swa_ring.pop_front();
            }
        }

        if step % stride == 0 || step == cfg.max_steps {
            let eval_params = if cfg.swa_window > 0 {
                mean_params(swa_ring.iter())
            } else {
                params.clone()
            };
            let val_acc = eval_metric(spec, &eval_params, data, &splits.val, cfg.loss)?;
            let train_acc = eval_metric(spec, &eval_params, data, &splits.train, cfg.loss)?;
            let test_acc = eval_metric(spec, &eval_params, data, &splits.test, cfg.loss)?;
            trajectory.points.push(TrajectoryPoint {
                step,
                params: params.clone(),
                train_loss,
                val_acc,
            });
            metrics.push(MetricsRow { step, train_loss, train_acc, val_acc, test_acc });

            let metric = if splits.val.is_empty() { f64::NEG_INFINITY } else { val_acc };
            let improved = match &best {
                Some((_, best_metric, _)) => metric > *best_metric,
                None => true,
            };
            if improved {
                best = Some((step, metric, eval_params));
            }
        }
    }

    let (best_step, mut best_val_acc, best_params) = best.expect("max_steps >= 1 records at least one step");
    if splits.val.is_empty() {
        best_val_acc = f64::NAN;
    }
    // by construction the selected checkpoint dominates every recorded step
    debug_assert!(trajectory
        .points
        .iter()
        .all(|p| splits.val.is_empty() || p.val_acc <= best_val_acc || best_val_acc.is_nan()));

    Ok(TrainOutcome {
        final_params: params,
        best_params,
        best_step,
        best_val_acc,
        trajectory,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splines::{ActKind, ActivationBinding};
    use crate::tasks::{gen_two_blobs, split};

    fn blob_spec() -> MlpSpec {
        MlpSpec {
            input_dim: 2,
            hidden: vec![],
            output_dim: 2,
            residual: false,
            activation: ActivationBinding::Shared(ActKind::Relu),
            iaf: None,
            spectral_norm: false,
            head: Head::Logits,
            init_scale: 1.0,
        }
    }

    #[test]
    fn linear_model_separates_blobs_within_500_steps() {
        let ds = gen_two_blobs(100, 2.0, 7);
        let splits = split(ds.rows(), 0.8, 7).unwrap().with_validation_like_test();
        let mut cfg = TrainConfig::new(Optimizer::Gd, 0.1, 500, LossKind::SoftmaxCe);
        cfg.swa_window = 0;
        let out = train(&blob_spec(), &ds, &splits, &cfg).unwrap();
        let train_acc = eval_metric(&blob_spec(), &out.final_params, &ds, &splits.train, cfg.loss).unwrap();
        assert_eq!(train_acc, 1.0);
    }

    #[test]
    fn zero_max_steps_is_rejected() {
        let ds = gen_two_blobs(10, 2.0, 1);
        let splits = split(ds.rows(), 0.8, 1).unwrap();
        let cfg = TrainConfig::new(Optimizer::Gd, 0.1, 0, LossKind::SoftmaxCe);
        assert!(train(&blob_spec(), &ds, &splits, &cfg).is_err());
    }

    #[test]
    fn zero_lr_keeps_params_and_trajectory_constant() {
        let ds = gen_two_blobs(20, 2.0, 3);
        let splits = split(ds.rows(), 0.8, 3).unwrap().with_validation_like_test();
        let mut cfg = TrainConfig::new(Optimizer::Gd, 0.0, 20, LossKind::SoftmaxCe);
        cfg.swa_window = 0;
        let out = train(&blob_spec(), &ds, &splits, &cfg).unwrap();
        let init = init_params(&blob_spec(), cfg.seed);
        assert_eq!(out.final_params, init);
        let first = &out.trajectory.points[0];
        for p in &out.trajectory.points {
            assert_eq!(p.params, first.params);
            assert_eq!(p.train_loss, first.train_loss);
        }
    }

    #[test]
    fn determinism_and_full_batch_shuffle_independence() {
        let ds = gen_two_blobs(30, 2.0, 5);
        let splits = split(ds.rows(), 0.8, 5).unwrap().with_validation_like_test();
        let mut cfg = TrainConfig::new(Optimizer::Rmsprop, 0.05, 30, LossKind::SoftmaxCe);
        cfg.swa_window = 5;
        let a = train(&blob_spec(), &ds, &splits, &cfg).unwrap();
        let b = train(&blob_spec(), &ds, &splits, &cfg).unwrap();
        for (pa, pb) in a.trajectory.points.iter().zip(&b.trajectory.points) {
            assert_eq!(pa.train_loss, pb.train_loss);
            assert_eq!(pa.params, pb.params);
        }
        // full batch: the shuffling seed cannot matter
        let mut cfg2 = cfg.clone();
        cfg2.batch_size = Some(ds.rows() * 2);
        let c = train(&blob_spec(), &ds, &splits, &cfg2).unwrap();
        let mut cfg3 = cfg2.clone();
        cfg3.seed = cfg.seed; // same init seed; batching order is natural either way
        let d = train(&blob_spec(), &ds, &splits, &cfg3).unwrap();
        for (pc, pd) in c.trajectory.points.iter().zip(&d.trajectory.points) {
            assert_eq!(pc.train_loss, pd.train_loss);
        }
    }

    #[test]
    fn swa_average_hand_cases() {
        let spec = blob_spec();
        let p0 = init_params(&spec, 1);
        let mut p2 = p0.clone();
        for w in &mut p2.weights {
            w.scale_assign(3.0);
        }
        let mk = |params: &ParamSet, step: usize| TrajectoryPoint {
            step,
            params: params.clone(),
            train_loss: 0.0,
            val_acc: 0.0,
        };
        let traj = Trajectory { points: vec![mk(&p0, 1), mk(&p2, 2)] };
        // window 1 keeps the last checkpoint
        let last = swa_average(&traj, 1).unwrap();
        assert_eq!(last, p2);
        // window 2 is the elementwise mean: (1x + 3x)/2 = 2x
        let mean = swa_average(&traj, 2).unwrap();
        for (m, base) in mean.weights.iter().zip(&p0.weights) {
            for (mv, bv) in m.data.iter().zip(&base.data) {
                assert!((mv - 2.0 * bv).abs() < 1e-15);
            }
        }
        // constant trajectory averages to itself
        let traj = Trajectory { points: vec![mk(&p0, 1), mk(&p0, 2), mk(&p0, 3)] };
        assert_eq!(swa_average(&traj, 50).unwrap(), p0);
        assert!(swa_average(&Trajectory::default(), 5).is_err());
    }

    #[test]
    fn loss_hand_values() {
        let kind = LossKind::Mse;
        let pred = Tensor::from_rows(&[vec![1.0], vec![2.0]]);
        assert_eq!(loss_value(kind, &pred, &pred).unwrap(), 0.0);
        let zero = Tensor::from_rows(&[vec![0.0]]);
        let one = Tensor::from_rows(&[vec![1.0]]);
        assert_eq!(loss_value(kind, &zero, &one).unwrap(), 1.0);

        // uniform logits over k classes give ln(k)
        let k = 7;
        let logits = Tensor::zeros(3, k);
        let mut onehot = Tensor::zeros(3, k);
        for r in 0..3 {
            *onehot.at_mut(r, r)= 1.0;
        }
        let ce = loss_value(LossKind::SoftmaxCe, &logits, &onehot).unwrap();
        assert!((ce - (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn accuracy_tie_breaks() {
        // regression prediction exactly midway snaps to the lower class
        let anchors: Vec<f64> = vec![-1.0, 0.0, 1.0];
        assert_eq!(nearest_anchor(-0.5, &anchors), 0);
        assert_eq!(nearest_anchor(0.5, &anchors), 1);
        assert_eq!(nearest_anchor(-0.9, &anchors), 0);

        // ten anchors spread over [-1,1]: -0.9 is closest to anchor 0 at -1.0
        let ten: Vec<f64> = (0..10).map(|i| -1.0 + 2.0 * i as f64 / 9.0).collect();
        assert_eq!(nearest_anchor(-0.9, &ten), 0);

        // logits argmax ties toward the lower class index
        let pred = Tensor::from_rows(&[vec![0.5, 0.5, 0.1]]);
        assert_eq!(argmax_classes(&pred), vec![0]);
    }

    #[test]
    fn divergence_carries_step_index() {
        let ds = gen_two_blobs(20, 2.0, 2);
        let splits = split(ds.rows(), 0.8, 2).unwrap();
        // squared error explodes under an absurd learning rate
        let mut cfg = TrainConfig::new(Optimizer::Gd, 1e12, 50, LossKind::Mse);
        cfg.swa_window = 0;
        let err = train(&blob_spec(), &ds, &splits, &cfg).unwrap_err();
        match err {
            Error::Divergence { step } => assert!(step >= 1),
            other => panic!("expected divergence, got {other}"),
        }
    }

    #[test]
    fn best_checkpoint_dominates_recorded_validation_metrics() {
        let ds = gen_two_blobs(50, 2.0, 9);
        let splits = split(ds.rows(), 0.8, 9).unwrap().with_validation_like_test();
        let mut cfg = TrainConfig::new(Optimizer::Gd, 0.3, 60, LossKind::SoftmaxCe);
        cfg.swa_window = 3;
        let out = train(&blob_spec(), &ds, &splits, &cfg).unwrap();
        for p in &out.trajectory.points {
            assert!(p.val_acc <= out.best_val_acc + 1e-12);
        }
    }
}
