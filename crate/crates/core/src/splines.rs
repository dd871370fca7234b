//! Learnable scalar activation functions parametrized as interpolating
//! splines on a regular grid of control points, with constant extrapolation
//! outside the grid interval.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterpMode {
    Nearest,
    Linear,
    Cubic,
}

/// Grid geometry and interpolation mode, without the control values.
/// Cheap to copy; the autograd ops embed one of these.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplineMeta {
    pub n_c: usize,
    pub a: f64,
    pub b: f64,
    pub mode: InterpMode,
}

/// Where a sample falls relative to the control grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GridPos {
    Below,
    Above,
    /// Inside cell `i` (between grid points i and i+1), at fraction `u` in [0,1].
    Cell { i: usize, u: f64 },
}

impl SplineMeta {
    pub fn step(&self) -> f64 {
        (self.b - self.a) / (self.n_c - 1) as f64
    }

    pub fn grid_point(&self, i: usize) -> f64 {
        self.a + i as f64 * self.step()
    }

    pub fn locate(&self, x: f64) -> GridPos {
        if x < self.a {
            return GridPos::Below;
        }
        if x > self.b {
            return GridPos::Above;
        }
        let t = (x - self.a) / self.step();
        let mut i = t.floor() as usize;
        if i > self.n_c - 2 {
            i = self.n_c - 2;
        }
        GridPos::Cell { i, u: t - i as f64 }
    }

    /// Grid index used by nearest-neighbor interpolation. Ties at cell
    /// midpoints go to the lower index.
    pub fn nearest_index(&self, x: f64) -> usize {
        if x <= self.a {
            return 0;
        }
        if x >= self.b {
            return self.n_c - 1;
        }
        let t = (x - self.a) / self.step();
        let i = (t - 0.5).ceil();
        (i.max(0.0) as usize).min(self.n_c - 1)
    }

    /// Map from control values ψ to natural-cubic second derivatives m = S·ψ.
    ///
    /// Natural boundary: m[0] = m[n-1] = 0; interior rows solve the uniform-grid
    /// tridiagonal system m[i-1] + 4 m[i] + m[i+1] = 6 (ψ[i-1] - 2ψ[i] + ψ[i+1]) / h².
    pub fn second_derivative_matrix(&self) -> Tensor {
        let n = self.n_c;
        let h = self.step();
        let mut s = Tensor::zeros(n, n);
        if n < 3 {
            return s; // straight segment, second derivatives stay zero
        }
        let k = n - 2; // interior unknowns
        for j in 0..n {
            // RHS of the tridiagonal system for ψ = e_j.
            let mut rhs = vec![0.0; k];
            for (row, r) in rhs.iter_mut().enumerate() {
                let i = row + 1;
                let psi = |idx: usize| if idx == j { 1.0 } else { 0.0 };
                *r = 6.0 * (psi(i - 1) - 2.0 * psi(i) + psi(i + 1)) / (h * h);
            }
            // Thomas algorithm with constant diagonals (1, 4, 1).
            let mut cp = vec![0.0; k];
            let mut dp = vec![0.0; k];
            cp[0] = 1.0 / 4.0;
            dp[0] = rhs[0] / 4.0;
            for i in 1..k {
                let denom = 4.0 - cp[i - 1];
                cp[i] = 1.0 / denom;
                dp[i] = (rhs[i] - dp[i - 1]) / denom;
            }
            let mut m = vec![0.0; k];
            m[k - 1] = dp[k - 1];
            for i in (0..k - 1).rev() {
                m[i] = dp[i] - cp[i] * m[i + 1];
            }
            for (row, &v) in m.iter().enumerate() {
                *s.at_mut(row + 1, j) = v;
            }
        }
        s
    }

    /// Interpolant value at `x`, given control values and (for cubic mode)
    /// the second derivatives m.
    pub fn value_at(&self, x: f64, psi: &[f64], m: Option<&[f64]>) -> f64 {
        match self.locate(x) {
            GridPos::Below => psi[0],
            GridPos::Above => psi[self.n_c - 1],
            GridPos::Cell { i, u } => match self.mode {
                InterpMode::Nearest => psi[self.nearest_index(x)],
                InterpMode::Linear => (1.0 - u) * psi[i] + u * psi[i + 1],
                InterpMode::Cubic => {
                    let m = m.expect("cubic eval requires second derivatives");
                    let h = self.step();
                    let a = 1.0 - u;
                    let b = u;
                    a * psi[i]
                        + b * psi[i + 1]
                        + (h * h / 6.0) * ((a * a * a - a) * m[i] + (b * b * b - b) * m[i + 1])
                }
            },
        }
    }

    /// Derivative of the interpolant at `x` (0 outside the grid, and 0 a.e.
    /// for nearest mode).
    pub fn slope_at(&self, x: f64, psi: &[f64], m: Option<&[f64]>) -> f64 {
        match self.locate(x) {
            GridPos::Below | GridPos::Above => 0.0,
            GridPos::Cell { i, u } => match self.mode {
                InterpMode::Nearest => 0.0,
                InterpMode::Linear => (psi[i + 1] - psi[i]) / self.step(),
                InterpMode::Cubic => {
                    let m = m.expect("cubic slope requires second derivatives");
                    let h = self.step();
                    let a = 1.0 - u;
                    let b = u;
                    (psi[i + 1] - psi[i]) / h
                        + (h / 6.0)
                            * ((1.0 - 3.0 * a * a) * m[i] + (3.0 * b * b - 1.0) * m[i + 1])
                }
            },
        }
    }

    /// Second derivative at `x` (cubic mode only; 0 elsewhere).
    pub fn curvature_at(&self, x: f64, m: Option<&[f64]>) -> f64 {
        match self.locate(x) {
            GridPos::Below | GridPos::Above => 0.0,
            GridPos::Cell { i, u } => match self.mode {
                InterpMode::Cubic => {
                    let m = m.expect("cubic curvature requires second derivatives");
                    (1.0 - u) * m[i] + u * m[i + 1]
                }
                _ => 0.0,
            },
        }
    }
}

/// The learnable activation: control values ψ on a regular grid over [a, b].
///
/// Serialized as `{n_c, a, b, mode, psi[]}`; the JSON round-trip is exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineActivation {
    pub n_c: usize,
    pub a: f64,
    pub b: f64,
    pub mode: InterpMode,
    pub psi: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplineInit {
    Zeros,
    Relu,
    Identity,
}

/// Construct a spline with the given initialization on a regular grid.
pub fn init_spline(kind: SplineInit, n_c: usize, a: f64, b: f64) -> Result<SplineActivation> {
    if n_c < 2 {
        return Err(Error::Config(format!("spline needs at least 2 control points, got {n_c}")));
    }
    if a >= b {
        return Err(Error::Config(format!("spline interval must satisfy a < b, got [{a}, {b}]")));
    }
    let meta = SplineMeta { n_c, a, b, mode: InterpMode::Linear };
    let psi = (0..n_c)
        .map(|i| {
            let g = meta.grid_point(i);
            match kind {
                SplineInit::Zeros => 0.0,
                SplineInit::Relu => g.max(0.0),
                SplineInit::Identity => g,
            }
        })
        .collect();
    Ok(SplineActivation { n_c, a, b, mode: InterpMode::Linear, psi })
}

impl SplineActivation {
    pub fn meta(&self) -> SplineMeta {
        SplineMeta { n_c: self.n_c, a: self.a, b: self.b, mode: self.mode }
    }

    pub fn with_mode(mut self, mode: InterpMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_c < 2 || self.psi.len() != self.n_c {
            return Err(Error::Config(format!(
                "invalid spline: n_c={}, len(psi)={}",
                self.n_c,
                self.psi.len()
            )));
        }
        if self.a >= self.b {
            return Err(Error::Config(format!("invalid spline interval [{}, {}]", self.a, self.b)));
        }
        Ok(())
    }

    /// Second derivatives for cubic evaluation (zeros for other modes).
    pub fn second_derivatives(&self) -> Vec<f64> {
        if self.mode != InterpMode::Cubic {
            return vec![0.0; self.n_c];
        }
        let s = self.meta().second_derivative_matrix();
        let mut m = vec![0.0; self.n_c];
        for (i, mi) in m.iter_mut().enumerate() {
            *mi = (0..self.n_c).map(|j| s.at(i, j) * self.psi[j]).sum();
        }
        m
    }

    pub fn eval(&self, x: f64) -> f64 {
        let m = self.second_derivatives();
        self.meta().value_at(x, &self.psi, Some(&m))
    }

    pub fn eval_tensor(&self, x: &Tensor) -> Tensor {
        let m = self.second_derivatives();
        let meta = self.meta();
        x.map(|v| meta.value_at(v, &self.psi, Some(&m)))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spline: SplineActivation = serde_json::from_str(s)?;
        spline.validate()?;
        Ok(spline)
    }
}

/// tanh(αx), the tunable-complexity baseline activation.
pub fn tanh_prefactor(alpha: f64, x: f64) -> Result<f64> {
    if alpha <= 0.0 {
        return Err(Error::Config(format!("tanh prefactor must be positive, got {alpha}")));
    }
    Ok((alpha * x).tanh())
}

/// How activations are attached to a network: one builtin/learned function
/// shared across hidden layers, or a distinct one per hidden layer.
/// Per-input-dimension splines (IAFs) attach separately, before the first layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ActKind {
    Relu,
    TanhPrefactor(f64),
    Spline(SplineActivation),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ActivationBinding {
    Shared(ActKind),
    PerLayer(Vec<ActKind>),
}

impl ActivationBinding {
    /// The activation applied after hidden layer `layer` out of `n_layers`.
    pub fn for_layer(&self, layer: usize) -> &ActKind {
        match self {
            ActivationBinding::Shared(k) => k,
            ActivationBinding::PerLayer(ks) => &ks[layer],
        }
    }

    pub fn validate(&self, n_hidden: usize) -> Result<()> {
        match self {
            ActivationBinding::Shared(k) => validate_kind(k),
            ActivationBinding::PerLayer(ks) => {
                if ks.len() != n_hidden {
                    return Err(Error::Config(format!(
                        "per-layer binding has {} entries for {} hidden layers",
                        ks.len(),
                        n_hidden
                    )));
                }
                ks.iter().try_for_each(validate_kind)
            }
        }
    }

    /// Mutable references to every spline ψ in the binding, in layer order.
    pub fn splines_mut(&mut self) -> Vec<&mut SplineActivation> {
        match self {
            ActivationBinding::Shared(ActKind::Spline(s)) => vec![s],
            ActivationBinding::Shared(_) => vec![],
            ActivationBinding::PerLayer(ks) => ks
                .iter_mut()
                .filter_map(|k| match k {
                    ActKind::Spline(s) => Some(s),
                    _ => None,
                })
                .collect(),
        }
    }
}

fn validate_kind(k: &ActKind) -> Result<()> {
    match k {
        ActKind::Relu => Ok(()),
        ActKind::TanhPrefactor(a) => {
            if *a > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("tanh prefactor must be positive, got {a}")))
            }
        }
        ActKind::Spline(s) => s.validate(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_examples() {
        let s = init_spline(SplineInit::Relu, 3, -1.0, 1.0).unwrap();
        assert_eq!(s.psi, vec![0.0, 0.0, 1.0]);
        let s = init_spline(SplineInit::Identity, 3, -1.0, 1.0).unwrap();
        assert_eq!(s.psi, vec![-1.0, 0.0, 1.0]);
        let s = init_spline(SplineInit::Zeros, 50, -5.0, 5.0).unwrap();
        assert!(s.psi.iter().all(|&v| v == 0.0));
        assert_eq!(s.psi.len(), 50);
    }

    #[test]
    fn zero_spline_evaluates_to_zero() {
        let s = init_spline(SplineInit::Zeros, 50, -5.0, 5.0).unwrap();
        for x in [-10.0, -0.3, 0.0, 2.7, 10.0] {
            assert_eq!(s.eval(x), 0.0);
        }
    }

    #[test]
    fn relu_init_reproduces_relu_on_grid_interval() {
        // 51 points on [-5,5] puts a control point exactly at 0.
        let s = init_spline(SplineInit::Relu, 51, -5.0, 5.0).unwrap();
        let mut x = -5.0;
        while x <= 5.0 {
            assert!((s.eval(x) - x.max(0.0)).abs() < 1e-12, "x={x}");
            x += 0.031;
        }
        assert_eq!(s.eval(10.0), 5.0);
        assert_eq!(s.eval(-10.0), 0.0);
    }

    #[test]
    fn linear_two_points() {
        let s = SplineActivation { n_c: 2, a: 0.0, b: 1.0, mode: InterpMode::Linear, psi: vec![0.0, 1.0] };
        assert!((s.eval(0.25) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn grid_point_exactness_all_modes() {
        let psi = vec![0.3, -1.2, 0.7, 2.0, -0.5];
        for mode in [InterpMode::Nearest, InterpMode::Linear, InterpMode::Cubic] {
            let s = SplineActivation { n_c: 5, a: -2.0, b: 2.0, mode, psi: psi.clone() };
            for i in 0..5 {
                let x = s.meta().grid_point(i);
                assert!((s.eval(x) - psi[i]).abs() < 1e-12, "{mode:?} at grid {i}");
            }
        }
    }

    #[test]
    fn nearest_ties_round_down() {
        let s = SplineActivation { n_c: 3, a: 0.0, b: 2.0, mode: InterpMode::Nearest, psi: vec![1.0, 2.0, 3.0] };
        // midpoint between grid points 0 and 1 is 0.5
        assert_eq!(s.eval(0.5), 1.0);
        assert_eq!(s.eval(0.51), 2.0);
        assert_eq!(s.eval(1.5), 2.0);
    }

    #[test]
    fn cubic_is_continuous_and_interpolating() {
        let s = SplineActivation {
            n_c: 7,
            a: -3.0,
            b: 3.0,
            mode: InterpMode::Cubic,
            psi: vec![0.0, 1.0, -1.0, 0.5, 2.0, -0.3, 0.0],
        };
        // continuity across cell boundaries
        for i in 1..6 {
            let x = s.meta().grid_point(i);
            let lo = s.eval(x - 1e-9);
            let hi = s.eval(x + 1e-9);
            assert!((lo - hi).abs() < 1e-6, "jump at grid point {i}");
        }
    }

    #[test]
    fn tanh_prefactor_values() {
        assert_eq!(tanh_prefactor(1.0, 0.0).unwrap(), 0.0);
        assert!((tanh_prefactor(2.0, 0.5).unwrap() - 1.0_f64.tanh()).abs() < 1e-15);
        assert!(tanh_prefactor(200.0, 0.1).unwrap() > 0.999_999);
        assert!(tanh_prefactor(0.0, 1.0).is_err());
        assert!(tanh_prefactor(-1.0, 1.0).is_err());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let s = SplineActivation {
            n_c: 4,
            a: -5.0,
            b: 5.0,
            mode: InterpMode::Cubic,
            psi: vec![0.1234567890123456, -7.0e-13, 3.0, std::f64::consts::PI],
        };
        let json = s.to_json().unwrap();
        let back = SplineActivation::from_json(&json).unwrap();
        assert_eq!(s, back);
    }
}
