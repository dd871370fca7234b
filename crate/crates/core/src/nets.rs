//! Fully-connected networks assembled on the autograd tape: per-layer or
//! shared activations, optional per-input-dimension splines applied before
//! the first layer, residual connections between equal-width hidden layers,
//! and spectral normalization of the weights.

use crate::autograd::{NodeId, Op, Tape};
use crate::error::{Error, Result};
use crate::splines::{ActKind, ActivationBinding, InterpMode, SplineActivation};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    /// One output per class, consumed by softmax cross-entropy or one-hot MSE.
    Logits,
    /// A single scalar output.
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub residual: bool,
    pub activation: ActivationBinding,
    /// Per-input-dimension activations applied to the raw features.
    pub iaf: Option<Vec<SplineActivation>>,
    pub spectral_norm: bool,
    pub head: Head,
    /// Multiplier on the fan-based init limit. One-hot algorithmic inputs
    /// need a smaller scale to train in the feature-learning regime.
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

fn default_init_scale() -> f64 {
    1.0
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.head == Head::Regression && self.output_dim != 1 {
            return Err(Error::Config(format!(
                "regression head needs output_dim 1, got {}",
                self.output_dim
            )));
        }
        self.activation.validate(self.hidden.len())?;
        if let Some(iaf) = &self.iaf {
            if iaf.len() != self.input_dim {
                return Err(Error::Config(format!(
                    "{} input activation functions for {} input dimensions",
                    iaf.len(),
                    self.input_dim
                )));
            }
            iaf.iter().try_for_each(|s| s.validate())?;
        }
        Ok(())
    }

    /// Layer widths including input and output.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = Vec::with_capacity(self.hidden.len() + 2);
        d.push(self.input_dim);
        d.extend_from_slice(&self.hidden);
        d.push(self.output_dim);
        d
    }

    /// Mutable references to every learnable spline: hidden-layer splines in
    /// layer order, then input activation functions in dimension order.
    pub fn splines_mut(&mut self) -> Vec<&mut SplineActivation> {
        let mut out = self.activation.splines_mut();
        if let Some(iaf) = &mut self.iaf {
            out.extend(iaf.iter_mut());
        }
        out
    }
}

/// The network's numeric parameters θ: one weight matrix and bias row per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl ParamSet {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for w in &self.weights {
            out.extend_from_slice(&w.data);
        }
        for b in &self.biases {
            out.extend_from_slice(&b.data);
        }
        out
    }

    pub fn unflatten_like(&self, flat: &[f64]) -> ParamSet {
        let mut out = self.clone();
        let mut at = 0;
        for w in &mut out.weights {
            let n = w.data.len();
            w.data.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        for b in &mut out.biases {
            let n = b.data.len();
            b.data.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(Tensor::len).sum::<usize>()
            + self.biases.iter().map(Tensor::len).sum::<usize>()
    }
}

/// Glorot-style uniform initialization: weights in ±√(6/(fan_in+fan_out)),
/// biases zero. Deterministic per seed.
pub fn init_params(spec: &MlpSpec, seed: u64) -> ParamSet {
    let dims = spec.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for l in 0..dims.len() - 1 {
        let (fan_in, fan_out) = (dims[l], dims[l + 1]);
        let limit = spec.init_scale * (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..limit)).collect();
        weights.push(Tensor::new(fan_in, fan_out, data));
        biases.push(Tensor::zeros(1, fan_out));
    }
    ParamSet { weights, biases }
}

/// Largest singular value by power iteration on WᵀW, to relative tolerance
/// 1e-8 with at most 1000 iterations.
pub fn sigma_max(w: &Tensor) -> Result<(f64, Tensor, Tensor)> {
    if w.data.iter().all(|&v| v == 0.0) {
        return Err(Error::Numerical("spectral norm of a zero matrix".into()));
    }
    let n = w.cols;
    // Deterministic start; fall back to basis vectors if the start lands in
    // the null space.
    let mut starts: Vec<Tensor> = Vec::with_capacity(n + 1);
    starts.push(Tensor::new(n, 1, vec![1.0 / (n as f64).sqrt(); n]));
    for j in 0..n {
        let mut e = Tensor::zeros(n, 1);
        e.data[j] = 1.0;
        starts.push(e);
    }
    for mut v in starts {
        let mut sigma_prev = 0.0;
        let mut ok = false;
        let mut u = Tensor::zeros(w.rows, 1);
        for _ in 0..1000 {
            u = w.matmul(&v)?;
            let sigma = u.norm();
            if sigma == 0.0 {
                break;
            }
            u.scale_assign(1.0 / sigma);
            v = w.matmul_ta(&u)?;
            let vn = v.norm();
            if vn == 0.0 {
                break;
            }
            v.scale_assign(1.0 / vn);
            if (vn - sigma_prev).abs() <= 1e-8 * vn.abs() {
                sigma_prev = vn;
                ok = true;
                break;
            }
            sigma_prev = vn;
        }
        if ok {
            return Ok((sigma_prev, u, v));
        }
    }
    Err(Error::Numerical("power iteration failed to converge".into()))
}

/// W divided by its largest singular value.
pub fn spectral_normalize(w: &Tensor) -> Result<Tensor> {
    let (sigma, _, _) = sigma_max(w)?;
    Ok(w.map(|v| v / sigma))
}

/// Activation functions resolved to tape nodes. Shared bindings reuse one ψ
/// leaf across layers so the outer gradient accumulates over all uses.
#[derive(Debug, Clone)]
pub enum ActNode {
    Relu,
    TanhPrefactor(f64),
    Spline { psi: NodeId, m: Option<NodeId>, meta: crate::splines::SplineMeta },
}

#[derive(Debug, Clone)]
pub struct ActivationNodes {
    pub per_layer: Vec<ActNode>,
    pub iaf: Vec<ActNode>,
    /// The learnable ψ leaves in canonical order (hidden splines, then IAFs),
    /// deduplicated: a shared binding contributes a single leaf.
    pub psi_leaves: Vec<NodeId>,
}

impl ActivationNodes {
    pub fn build(tape: &mut Tape, spec: &MlpSpec, learnable: bool) -> Result<Self> {
        let mut psi_leaves = Vec::new();
        let mut push_spline = |tape: &mut Tape, s: &SplineActivation| -> Result<ActNode> {
            let psi = tape.leaf(Tensor::row_vec(s.psi.clone()), learnable);
            psi_leaves.push(psi);
            let m = if s.mode == InterpMode::Cubic {
                let sm = tape.constant(s.meta().second_derivative_matrix());
                Some(tape.push(Op::MatMulTB(psi, sm))?)
            } else {
                None
            };
            Ok(ActNode::Spline { psi, m, meta: s.meta() })
        };

        let n_hidden = spec.hidden.len();
        let per_layer = match &spec.activation {
            ActivationBinding::Shared(kind) => {
                let node = match kind {
                    ActKind::Relu => ActNode::Relu,
                    ActKind::TanhPrefactor(a) => ActNode::TanhPrefactor(*a),
                    ActKind::Spline(s) => push_spline(tape, s)?,
                };
                vec![node; n_hidden]
            }
            ActivationBinding::PerLayer(kinds) => {
                let mut v = Vec::with_capacity(n_hidden);
                for kind in kinds {
                    v.push(match kind {
                        ActKind::Relu => ActNode::Relu,
                        ActKind::TanhPrefactor(a) => ActNode::TanhPrefactor(*a),
                        ActKind::Spline(s) => push_spline(tape, s)?,
                    });
                }
                v
            }
        };
        let mut iaf = Vec::new();
        if let Some(splines) = &spec.iaf {
            for s in splines {
                iaf.push(push_spline(tape, s)?);
            }
        }
        Ok(ActivationNodes { per_layer, iaf, psi_leaves })
    }
}

/// Parameter tensors placed on a tape. In the meta-gradient window these may
/// be computed nodes rather than leaves.
#[derive(Debug, Clone)]
pub struct ParamNodes {
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
}

impl ParamNodes {
    pub fn leaves(tape: &mut Tape, params: &ParamSet, requires_grad: bool) -> Self {
        ParamNodes {
            weights: params.weights.iter().map(|w| tape.leaf(w.clone(), requires_grad)).collect(),
            biases: params.biases.iter().map(|b| tape.leaf(b.clone(), requires_grad)).collect(),
        }
    }

    pub fn all(&self) -> Vec<NodeId> {
        self.weights.iter().chain(self.biases.iter()).copied().collect()
    }
}

fn apply_activation(tape: &mut Tape, act: &ActNode, z: NodeId) -> Result<NodeId> {
    Ok(match act {
        ActNode::Relu => tape.push(Op::Relu(z))?,
        ActNode::TanhPrefactor(a) => {
            let scaled = tape.push(Op::Scale(z, *a))?;
            tape.push(Op::Tanh(scaled))?
        }
        ActNode::Spline { psi, m, meta } => {
            tape.push(Op::SplineEval { x: z, psi: *psi, m: *m, meta: *meta })?
        }
    })
}

/// Record the network's forward pass on the tape and return the output node.
pub fn forward_graph(
    tape: &mut Tape,
    spec: &MlpSpec,
    params: &ParamNodes,
    acts: &ActivationNodes,
    x: NodeId,
) -> Result<NodeId> {
    if tape.value(x).cols != spec.input_dim {
        return Err(Error::ShapeMismatch {
            op: "forward",
            lhs: tape.value(x).shape(),
            rhs: (tape.value(x).rows, spec.input_dim),
        });
    }
    let mut cur = x;

    if !acts.iaf.is_empty() {
        let total = spec.input_dim;
        let mut acc: Option<NodeId> = None;
        for (j, act) in acts.iaf.iter().enumerate() {
            let col = tape.push(Op::SliceCols(cur, j, j + 1))?;
            let a = apply_activation(tape, act, col)?;
            let padded = tape.push(Op::PadCols { x: a, at: j, total })?;
            acc = Some(match acc {
                Some(prev) => tape.push(Op::Add(prev, padded))?,
                None => padded,
            });
        }
        cur = acc.expect("input dimension is nonzero");
    }

    let dims = spec.dims();
    let n_layers = dims.len() - 1;
    for l in 0..n_layers {
        let w = if spec.spectral_norm {
            let wv = tape.value(params.weights[l]).clone();
            let (_, u, v) = sigma_max(&wv)?;
            let u = tape.constant(u);
            let v = tape.constant(v);
            let utw = tape.push(Op::MatMulTA(u, params.weights[l]))?;
            let sigma = tape.push(Op::MatMul(utw, v))?;
            let inv = tape.push(Op::Recip(sigma))?;
            tape.push(Op::MulScalar(params.weights[l], inv))?
        } else {
            params.weights[l]
        };
        let z = tape.push(Op::MatMul(cur, w))?;
        let z = tape.push(Op::AddRow(z, params.biases[l]))?;
        if l == n_layers - 1 {
            cur = z; // affine head
        } else {
            let mut h = apply_activation(tape, &acts.per_layer[l], z)?;
            if spec.residual && l > 0 && dims[l] == dims[l + 1] {
                h = tape.push(Op::Add(h, cur))?;
            }
            cur = h;
        }
    }
    Ok(cur)
}

/// Plain forward evaluation through a throwaway tape. The activations are
/// read from the spec itself.
pub fn eval(spec: &MlpSpec, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xid = tape.constant(x.clone());
    let acts = ActivationNodes::build(&mut tape, spec, false)?;
    let pids = ParamNodes::leaves(&mut tape, params, false);
    let out = forward_graph(&mut tape, spec, &pids, &acts, xid)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splines::{init_spline, SplineInit};
    use rand::Rng;

    fn relu_spec(input: usize, hidden: Vec<usize>, output: usize) -> MlpSpec {
        MlpSpec {
            input_dim: input,
            hidden,
            output_dim: output,
            residual: false,
            activation: ActivationBinding::Shared(ActKind::Relu),
            iaf: None,
            spectral_norm: false,
            head: Head::Logits,
            init_scale: 1.0,
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases_and_bounded_weights() {
        let spec = relu_spec(7, vec![5, 5], 3);
        let a = init_params(&spec, 42);
        let b = init_params(&spec, 42);
        assert_eq!(a, b);
        for bias in &a.biases {
            assert!(bias.data.iter().all(|&v| v == 0.0));
        }
        // bound check over many draws
        let dims = spec.dims();
        for seed in 0..1000 {
            let p = init_params(&spec, seed);
            for (l, w) in p.weights.iter().enumerate() {
                let limit = (6.0 / (dims[l] + dims[l + 1]) as f64).sqrt();
                assert!(w.data.iter().all(|&v| v.abs() < limit));
            }
        }
    }

    #[test]
    fn zero_hidden_layers_is_a_linear_model() {
        let spec = relu_spec(3, vec![], 2);
        let params = init_params(&spec, 1);
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]);
        let out = eval(&spec, &params, &x).unwrap();
        let expect = x.matmul(&params.weights[0]).unwrap();
        for (o, e) in out.data.iter().zip(&expect.data) {
            assert!((o - e).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_iafs_do_not_change_the_output() {
        let mut spec = relu_spec(4, vec![6], 3);
        let params = init_params(&spec, 3);
        let x = Tensor::from_rows(&[vec![0.3, -0.8, 0.1, 0.9], vec![-0.2, 0.5, -0.6, 0.0]]);
        let plain = eval(&spec, &params, &x).unwrap();
        spec.iaf = Some(
            (0..4).map(|_| init_spline(SplineInit::Identity, 21, -1.0, 1.0).unwrap()).collect(),
        );
        let with_iaf = eval(&spec, &params, &x).unwrap();
        for (a, b) in plain.data.iter().zip(&with_iaf.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_and_per_layer_relu_bindings_agree() {
        let mut spec = relu_spec(5, vec![4, 4], 2);
        let params = init_params(&spec, 11);
        let x = Tensor::from_rows(&[vec![0.1, -0.4, 0.9, 0.2, -0.7]]);
        let shared = eval(&spec, &params, &x).unwrap();
        spec.activation = ActivationBinding::PerLayer(vec![ActKind::Relu, ActKind::Relu]);
        let per_layer = eval(&spec, &params, &x).unwrap();
        assert_eq!(shared.data, per_layer.data);
    }

    #[test]
    fn spectral_normalize_hand_cases() {
        let d = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]);
        let n = spectral_normalize(&d).unwrap();
        assert!((n.at(0, 0) - 1.0).abs() < 1e-7);
        assert!((n.at(1, 1) - 0.5).abs() < 1e-7);

        // rotation matrix is left unchanged
        let (c, s) = (0.6, 0.8);
        let q = Tensor::from_rows(&[vec![c, -s], vec![s, c]]);
        let n = spectral_normalize(&q).unwrap();
        for (a, b) in n.data.iter().zip(&q.data) {
            assert!((a - b).abs() < 1e-7);
        }

        assert!(spectral_normalize(&Tensor::zeros(3, 3)).is_err());
    }

    /// One-sided Jacobi SVD used as an independent oracle for σ_max.
    fn jacobi_sigma_max(w: &Tensor) -> f64 {
        let mut a = w.clone();
        let n = a.cols;
        for _ in 0..60 {
            let mut off = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    let mut app = 0.0;
                    let mut aqq = 0.0;
                    let mut apq = 0.0;
                    for r in 0..a.rows {
                        app += a.at(r, p) * a.at(r, p);
                        aqq += a.at(r, q) * a.at(r, q);
                        apq += a.at(r, p) * a.at(r, q);
                    }
                    off += apq.abs();
                    if apq.abs() < 1e-15 {
                        continue;
                    }
                    let tau = (aqq - app) / (2.0 * apq);
                    let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    for r in 0..a.rows {
                        let (vp, vq) = (a.at(r, p), a.at(r, q));
                        *a.at_mut(r, p) = c * vp - s * vq;
                        *a.at_mut(r, q) = s * vp + c * vq;
                    }
                }
            }
            if off < 1e-14 {
                break;
            }
        }
        (0..n)
            .map(|j| (0..a.rows).map(|r| a.at(r, j) * a.at(r, j)).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    #[test]
    fn sigma_max_matches_jacobi_svd_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let w = Tensor {
                rows: 5,
                cols: 5,
                data: (0..25).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            };
            let (sigma, _, _) = sigma_max(&w).unwrap();
            let oracle = jacobi_sigma_max(&w);
            assert!((sigma - oracle).abs() / oracle <= 1e-6, "{sigma} vs {oracle}");
        }
    }

    #[test]
    fn spectral_norm_forward_is_scale_invariant() {
        let mut spec = relu_spec(4, vec![5, 5], 2);
        spec.spectral_norm = true;
        let params = init_params(&spec, 8);
        let x = Tensor::from_rows(&[vec![0.4, -0.3, 0.8, -0.1], vec![1.0, 0.2, -0.5, 0.6]]);
        let base = eval(&spec, &params, &x).unwrap();
        let mut scaled = params.clone();
        for w in &mut scaled.weights {
            w.scale_assign(3.0);
        }
        let out = eval(&spec, &scaled, &x).unwrap();
        for (a, b) in base.data.iter().zip(&out.data) {
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-9);
            assert!(rel <= 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn identity_spline_network_composes_to_affine_map() {
        // all-identity activations and no residuals collapse to a product of
        // the weight matrices
        let ident = || {
            ActKind::Spline(init_spline(SplineInit::Identity, 41, -20.0, 20.0).unwrap())
        };
        let spec = MlpSpec {
            input_dim: 3,
            hidden: vec![4, 4],
            output_dim: 2,
            residual: false,
            activation: ActivationBinding::PerLayer(vec![ident(), ident()]),
            iaf: None,
            spectral_norm: false,
            head: Head::Logits,
            init_scale: 1.0,
        };
        let params = init_params(&spec, 21);
        let x = Tensor::from_rows(&[vec![0.2, -0.4, 0.1]]);
        let out = eval(&spec, &params, &x).unwrap();
        let mut expect = x.clone();
        for (w, b) in params.weights.iter().zip(&params.biases) {
            expect = expect.matmul(w).unwrap();
            let mut shifted = expect.clone();
            for r in 0..shifted.rows {
                for c in 0..shifted.cols {
                    *shifted.at_mut(r, c) += b.data[c];
                }
            }
            expect = shifted;
        }
        for (a, b) in out.data.iter().zip(&expect.data) {
            assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn residual_requires_equal_widths_and_changes_output() {
        let mut spec = relu_spec(3, vec![4, 4], 1);
        let params = init_params(&spec, 2);
        let x = Tensor::from_rows(&[vec![0.5, -0.2, 0.3]]);
        let plain = eval(&spec, &params, &x).unwrap();
        spec.residual = true;
        let with_res = eval(&spec, &params, &x).unwrap();
        assert_ne!(plain.data, with_res.data);
    }
}
