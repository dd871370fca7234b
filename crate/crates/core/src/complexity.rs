//! Function-complexity analysis: total variation of the model output along
//! data-anchored linear paths (after subtracting the line connecting the
//! predicted endpoint values), 2D slices of the input space, and loss or
//! complexity landscapes over 2D slices of the parameter space.

use crate::error::{Error, Result};
use crate::nets::{eval, MlpSpec, ParamSet};
use crate::tasks::{Dataset, Targets};
use crate::tensor::Tensor;
use crate::training::{loss_value, target_tensor, LossKind, Trajectory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_N_PATHS: usize = 200;
pub const DEFAULT_N_POINTS: usize = 100;
pub const LANDSCAPE_RES: usize = 50;
pub const SLICE_RES: usize = 200;

/// A linear path between two input points, sampled at regular λ in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub n_points: usize,
}

impl Path {
    pub fn points(&self) -> Tensor {
        let d = self.x1.len();
        let mut out = Tensor::zeros(self.n_points, d);
        for k in 0..self.n_points {
            let lambda = k as f64 / (self.n_points - 1) as f64;
            for c in 0..d {
                out.data[k * d + c] = (1.0 - lambda) * self.x1[c] + lambda * self.x2[c];
            }
        }
        out
    }
}

/// Endpoint rows and the output dimension a path reads.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TvPath {
    pub a: usize,
    pub b: usize,
    pub out_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TvReport {
    pub per_path: Vec<f64>,
    pub mean: f64,
    pub n_paths: usize,
    pub out_dims: Vec<usize>,
}

/// Total variation of a sampled sequence after subtracting the straight line
/// connecting its endpoints.
pub fn tv_of_values(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len();
    let (first, last) = (values[0], values[n - 1]);
    let residual = |k: usize| {
        let lambda = k as f64 / (n - 1) as f64;
        values[k] - ((1.0 - lambda) * first + lambda * last)
    };
    let mut tv = 0.0;
    for k in 1..n {
        tv += (residual(k) - residual(k - 1)).abs();
    }
    tv
}

/// Draw path endpoints from a row pool. Classification paths connect points
/// with different labels; regression paths connect points whose targets
/// differ by at least the median pairwise gap. One output dimension is drawn
/// uniformly per path.
pub fn draw_tv_paths(
    ds: &Dataset,
    pool: &[usize],
    n_paths: usize,
    output_dim: usize,
    seed: u64,
) -> Result<Vec<TvPath>> {
    if pool.len() < 2 {
        return Err(Error::Data("need at least two rows to draw paths".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut paths = Vec::with_capacity(n_paths);
    match &ds.targets {
        Targets::Classes(classes) => {
            let first = classes[pool[0]];
            if pool.iter().all(|&r| classes[r] == first) {
                return Err(Error::Data("classification dataset has a single label".into()));
            }
            for _ in 0..n_paths {
                loop {
                    let a = pool[rng.gen_range(0..pool.len())];
                    let b = pool[rng.gen_range(0..pool.len())];
                    if classes[a] != classes[b] {
                        paths.push(TvPath { a, b, out_dim: rng.gen_range(0..output_dim) });
                        break;
                    }
                }
            }
        }
        Targets::Values(values) => {
            let gap = median_target_gap(values, pool, &mut rng);
            for _ in 0..n_paths {
                let mut tries = 0;
                loop {
                    let a = pool[rng.gen_range(0..pool.len())];
                    let b = pool[rng.gen_range(0..pool.len())];
                    if (values[a] - values[b]).abs() >= gap || tries > 1000 {
                        paths.push(TvPath { a, b, out_dim: rng.gen_range(0..output_dim) });
                        break;
                    }
                    tries += 1;
                }
            }
        }
    }
    Ok(paths)
}

fn median_target_gap(values: &[f64], pool: &[usize], rng: &mut ChaCha8Rng) -> f64 {
    let exhaustive = pool.len() * (pool.len() - 1) / 2;
    let mut gaps: Vec<f64> = if exhaustive <= 4000 {
        let mut g = Vec::with_capacity(exhaustive);
        for (i, &a) in pool.iter().enumerate() {
            for &b in &pool[i + 1..] {
                g.push((values[a] - values[b]).abs());
            }
        }
        g
    } else {
        (0..4000)
            .map(|_| {
                let a = pool[rng.gen_range(0..pool.len())];
                let b = pool[rng.gen_range(0..pool.len())];
                (values[a] - values[b]).abs()
            })
            .collect()
    };
    gaps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    gaps[gaps.len() / 2]
}

/// Evaluate the model along fixed paths and report the per-path TV.
pub fn tv_report(
    spec: &MlpSpec,
    params: &ParamSet,
    ds: &Dataset,
    paths: &[TvPath],
    n_points: usize,
) -> Result<TvReport> {
    if n_points < 2 {
        return Err(Error::Config("paths need at least 2 points".into()));
    }
    let d = ds.dims();
    let mut per_path = Vec::with_capacity(paths.len());
    let mut out_dims = Vec::with_capacity(paths.len());
    for path in paths {
        let p = Path {
            x1: ds.x.data[path.a * d..(path.a + 1) * d].to_vec(),
            x2: ds.x.data[path.b * d..(path.b + 1) * d].to_vec(),
            n_points,
        };
        let outputs = eval(spec, params, &p.points())?;
        let values: Vec<f64> = (0..n_points).map(|k| outputs.at(k, path.out_dim)).collect();
        per_path.push(tv_of_values(&values));
        out_dims.push(path.out_dim);
    }
    let mean = per_path.iter().sum::<f64>() / per_path.len().max(1) as f64;
    Ok(TvReport { n_paths: per_path.len(), per_path, mean, out_dims })
}

/// Draw paths and measure the model's mean TV over them.
pub fn tv_complexity(
    spec: &MlpSpec,
    params: &ParamSet,
    ds: &Dataset,
    pool: &[usize],
    n_paths: usize,
    n_points: usize,
    seed: u64,
) -> Result<TvReport> {
    let paths = draw_tv_paths(ds, pool, n_paths, spec.output_dim, seed)?;
    tv_report(spec, params, ds, &paths, n_points)
}

/// A 2D slice of the input space to evaluate the network on.
#[derive(Debug, Clone, PartialEq)]
pub enum SlicePlane {
    /// Vary dimensions m and n of an anchor point over a square range.
    AxisPair { anchor: Vec<f64>, dim_m: usize, dim_n: usize, range: (f64, f64) },
    /// The affine plane through three anchor points.
    ThreePoints { origin: Vec<f64>, p1: Vec<f64>, p2: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slice2d {
    pub resolution: usize,
    /// Raw head outputs (pre-softmax), row-major over the grid.
    pub grid: Vec<f64>,
    /// Min-max normalized copy for rendering.
    pub normalized: Vec<f64>,
}

pub fn input_slice_2d(
    spec: &MlpSpec,
    params: &ParamSet,
    plane: &SlicePlane,
    out_dim: usize,
    resolution: usize,
) -> Result<Slice2d> {
    if resolution < 2 {
        return Err(Error::Config("slice resolution must be at least 2".into()));
    }
    let d = spec.input_dim;
    let mut points = Tensor::zeros(resolution * resolution, d);
    match plane {
        SlicePlane::AxisPair { anchor, dim_m, dim_n, range } => {
            if dim_m == dim_n {
                return Err(Error::Config("slice dimensions must differ".into()));
            }
            if anchor.len() != d || *dim_m >= d || *dim_n >= d {
                return Err(Error::Config("slice anchor or dimensions out of range".into()));
            }
            for iu in 0..resolution {
                let u = range.0 + (range.1 - range.0) * iu as f64 / (resolution - 1) as f64;
                for iv in 0..resolution {
                    let v = range.0 + (range.1 - range.0) * iv as f64 / (resolution - 1) as f64;
                    let row = iu * resolution + iv;
                    points.data[row * d..(row + 1) * d].copy_from_slice(anchor);
                    points.data[row * d + dim_m] = u;
                    points.data[row * d + dim_n] = v;
                }
            }
        }
        SlicePlane::ThreePoints { origin, p1, p2 } => {
            let e1: Vec<f64> = p1.iter().zip(origin).map(|(a, o)| a - o).collect();
            let e2: Vec<f64> = p2.iter().zip(origin).map(|(a, o)| a - o).collect();
            let n1: f64 = e1.iter().map(|v| v * v).sum();
            let n2: f64 = e2.iter().map(|v| v * v).sum();
            let dot: f64 = e1.iter().zip(&e2).map(|(a, b)| a * b).sum();
            // Gram determinant vanishes iff the three points are collinear
            if n1 * n2 - dot * dot <= 1e-18 * (n1 * n2).max(1e-300) || n1 == 0.0 || n2 == 0.0 {
                return Err(Error::Config("slice anchor points are degenerate".into()));
            }
            for iu in 0..resolution {
                let s = iu as f64 / (resolution - 1) as f64;
                for iv in 0..resolution {
                    let t = iv as f64 / (resolution - 1) as f64;
                    let row = iu * resolution + iv;
                    for c in 0..d {
                        points.data[row * d + c] = origin[c] + s * e1[c] + t * e2[c];
                    }
                }
            }
        }
    }
    // evaluate in row chunks to bound peak memory on big grids
    let mut grid = Vec::with_capacity(resolution * resolution);
    let chunk = 4096;
    let mut row = 0;
    while row < points.rows {
        let hi = (row + chunk).min(points.rows);
        let sub = Tensor {
            rows: hi - row,
            cols: d,
            data: points.data[row * d..hi * d].to_vec(),
        };
        let out = eval(spec, params, &sub)?;
        if out_dim >= out.cols {
            return Err(Error::Config(format!("output dimension {out_dim} out of range")));
        }
        for r in 0..out.rows {
            grid.push(out.at(r, out_dim));
        }
        row = hi;
    }
    let (lo, hi) = grid.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
        (l.min(v), h.max(v))
    });
    let normalized = if hi > lo {
        grid.iter().map(|&v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; grid.len()]
    };
    Ok(Slice2d { resolution, grid, normalized })
}

/// Two orthonormal parameter-space directions plus the trajectory projected
/// onto them.
#[derive(Debug, Clone)]
pub struct PcaPlane {
    pub e1: Vec<f64>,
    pub e2: Vec<f64>,
    pub projections: Vec<(f64, f64)>,
}

/// Top-2 principal directions of the centered, flattened snapshots.
pub fn trajectory_pca(trajectory: &Trajectory) -> Result<PcaPlane> {
    if trajectory.points.len() < 3 {
        return Err(Error::Data(format!(
            "trajectory PCA needs at least 3 snapshots, got {}",
            trajectory.points.len()
        )));
    }
    let flats: Vec<Vec<f64>> = trajectory.points.iter().map(|p| p.params.flatten()).collect();
    let distinct = flats.iter().any(|f| f != &flats[0]);
    if !distinct {
        return Err(Error::Data("trajectory is rank deficient: all snapshots identical".into()));
    }
    let n = flats.len();
    let d = flats[0].len();
    let mut mean = vec![0.0; d];
    for f in &flats {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v / n as f64;
        }
    }
    let centered: Vec<Vec<f64>> = flats
        .iter()
        .map(|f| f.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();

    let cov_apply = |v: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; d];
        for row in &centered {
            let c: f64 = row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / n as f64;
            for (o, r) in out.iter_mut().zip(row) {
                *o += c * r;
            }
        }
        out
    };
    let normalize = |v: &mut [f64]| -> f64 {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in v.iter_mut() {
                *x /= norm;
            }
        }
        norm
    };
    let orth_against = |v: &mut [f64], e: &[f64]| {
        let dot: f64 = v.iter().zip(e).map(|(a, b)| a * b).sum();
        for (x, b) in v.iter_mut().zip(e) {
            *x -= dot * b;
        }
    };

    let power = |start: Vec<f64>, against: Option<&[f64]>| -> Vec<f64> {
        let mut v = start;
        if let Some(e) = against {
            orth_against(&mut v, e);
        }
        if normalize(&mut v) == 0.0 {
            // deterministic fallback: a basis vector not aligned with e1
            let k = against
                .map(|e| {
                    e.iter()
                        .enumerate()
                        .min_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
                        .map(|(i, _)| i)
                        .unwrap_or(0)
                })
                .unwrap_or(0);
            v = vec![0.0; d];
            v[k] = 1.0;
            if let Some(e) = against {
                orth_against(&mut v, e);
            }
            normalize(&mut v);
        }
        for _ in 0..300 {
            let mut next = cov_apply(&v);
            if let Some(e) = against {
                orth_against(&mut next, e);
            }
            if normalize(&mut next) == 0.0 {
                break; // zero residual variance: keep the current direction
            }
            let agreement: f64 = next.iter().zip(&v).map(|(a, b)| a * b).sum();
            v = next;
            if agreement.abs() > 1.0 - 1e-14 {
                break;
            }
        }
        v
    };

    let start1 = centered.iter().find(|c| c.iter().any(|&v| v != 0.0)).unwrap().clone();
    let e1 = power(start1, None);
    let start2 = centered.last().unwrap().clone();
    let mut e2 = power(start2, Some(&e1));
    // final re-orthonormalization
    orth_against(&mut e2, &e1);
    normalize(&mut e2);

    let projections = centered
        .iter()
        .map(|c| {
            let u: f64 = c.iter().zip(&e1).map(|(a, b)| a * b).sum();
            let v: f64 = c.iter().zip(&e2).map(|(a, b)| a * b).sum();
            (u, v)
        })
        .collect();
    Ok(PcaPlane { e1, e2, projections })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LandscapeKind {
    Loss,
    TvComplexity,
}

#[derive(Debug, Clone)]
pub struct Landscape {
    pub e1: Vec<f64>,
    pub e2: Vec<f64>,
    pub u_range: (f64, f64),
    pub v_range: (f64, f64),
    /// LANDSCAPE_RES × LANDSCAPE_RES values, row-major (u outer, v inner).
    pub grid: Vec<f64>,
    pub kind: LandscapeKind,
}

pub struct LandscapeParams<'a> {
    pub ds: &'a Dataset,
    pub rows: &'a [usize],
    pub loss: LossKind,
    /// Paths reused for every cell of a TV landscape.
    pub tv_paths: &'a [TvPath],
    pub tv_points: usize,
}

/// Evaluate train loss or mean TV on a 50×50 grid of parameter-space offsets
/// center + u·e1 + v·e2.
pub fn landscape(
    spec: &MlpSpec,
    center: &ParamSet,
    e1: &[f64],
    e2: &[f64],
    u_range: (f64, f64),
    v_range: (f64, f64),
    kind: LandscapeKind,
    params: &LandscapeParams,
) -> Result<Landscape> {
    let flat = center.flatten();
    if e1.len() != flat.len() || e2.len() != flat.len() {
        return Err(Error::Config("landscape basis does not match the parameter count".into()));
    }
    let dot: f64 = e1.iter().zip(e2).map(|(a, b)| a * b).sum();
    let n1: f64 = e1.iter().map(|v| v * v).sum::<f64>().sqrt();
    let n2: f64 = e2.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (n1 - 1.0).abs() > 1e-6 || (n2 - 1.0).abs() > 1e-6 || dot.abs() > 1e-6 {
        return Err(Error::Config("landscape basis must be orthonormal".into()));
    }

    let x = params.ds.gather_x(params.rows);
    let t = target_tensor(params.ds, params.rows, spec.head)?;
    let res = LANDSCAPE_RES;
    let mut grid = vec![0.0; res * res];
    for iu in 0..res {
        let u = u_range.0 + (u_range.1 - u_range.0) * iu as f64 / (res - 1) as f64;
        for iv in 0..res {
            let v = v_range.0 + (v_range.1 - v_range.0) * iv as f64 / (res - 1) as f64;
            let mut shifted = flat.clone();
            for ((s, a), b) in shifted.iter_mut().zip(e1).zip(e2) {
                *s += u * a + v * b;
            }
            let p = center.unflatten_like(&shifted);
            grid[iu * res + iv] = match kind {
                LandscapeKind::Loss => {
                    let pred = eval(spec, &p, &x)?;
                    loss_value(params.loss, &pred, &t)?
                }
                LandscapeKind::TvComplexity => {
                    tv_report(spec, &p, params.ds, params.tv_paths, params.tv_points)?.mean
                }
            };
        }
    }
    Ok(Landscape {
        e1: e1.to_vec(),
        e2: e2.to_vec(),
        u_range,
        v_range,
        grid,
        kind,
    })
}

/// Two random orthonormal parameter-space directions.
pub fn random_plane(dim: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |avoid: Option<&[f64]>| -> Vec<f64> {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if let Some(e) = avoid {
            let dot: f64 = v.iter().zip(e).map(|(a, b)| a * b).sum();
            for (x, b) in v.iter_mut().zip(e) {
                *x -= dot * b;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut v {
            *x /= norm;
        }
        v
    };
    let e1 = draw(None);
    let e2 = draw(Some(&e1));
    (e1, e2)
}

/// Extents covering the projected trajectory's bounding box, padded by 20%.
pub fn pca_extents(plane: &PcaPlane) -> ((f64, f64), (f64, f64)) {
    let mut u = (f64::INFINITY, f64::NEG_INFINITY);
    let mut v = (f64::INFINITY, f64::NEG_INFINITY);
    for &(pu, pv) in &plane.projections {
        u = (u.0.min(pu), u.1.max(pu));
        v = (v.0.min(pv), v.1.max(pv));
    }
    let pad = |(lo, hi): (f64, f64)| {
        let c = (lo + hi) / 2.0;
        let half = ((hi - lo) / 2.0).max(1e-12) * 1.2;
        (c - half, c + half)
    };
    (pad(u), pad(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{init_params, Head};
    use crate::splines::{ActKind, ActivationBinding};
    use crate::training::TrajectoryPoint;

    fn linear_spec(input: usize, output: usize) -> MlpSpec {
        MlpSpec {
            input_dim: input,
            hidden: vec![],
            output_dim: output,
            residual: false,
            activation: ActivationBinding::Shared(ActKind::Relu),
            iaf: None,
            spectral_norm: false,
            head: if output == 1 { Head::Regression } else { Head::Logits },
            init_scale: 1.0,
        }
    }

    fn mlp_spec(input: usize, hidden: usize, output: usize) -> MlpSpec {
        MlpSpec {
            input_dim: input,
            hidden: vec![hidden],
            output_dim: output,
            residual: false,
            activation: ActivationBinding::Shared(ActKind::TanhPrefactor(1.0)),
            iaf: None,
            spectral_norm: false,
            head: Head::Logits,
            init_scale: 1.0,
        }
    }

    fn labeled_blob_data(rows: usize, dims: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Tensor::zeros(rows, dims);
        let mut classes = Vec::new();
        for r in 0..rows {
            for c in 0..dims {
                x.data[r * dims + c] = rng.gen_range(-1.0..1.0);
            }
            classes.push(r % 3);
        }
        Dataset { x, targets: Targets::Classes(classes), class_count: 3, provenance: "t".into() }
    }

    #[test]
    fn hand_path_tv_is_two() {
        // residual after baseline subtraction is [0, 1, 0]
        assert_eq!(tv_of_values(&[0.0, 1.0, 0.0]), 2.0);
        // baseline subtraction removes any affine ramp
        assert_eq!(tv_of_values(&[5.0, 6.5, 8.0]), 0.0);
    }

    #[test]
    fn linear_and_constant_models_have_zero_tv() {
        let ds = labeled_blob_data(60, 4, 1);
        let pool: Vec<usize> = (0..60).collect();
        let spec = linear_spec(4, 3);
        let params = init_params(&spec, 2);
        let report = tv_complexity(&spec, &params, &ds, &pool, 200, 100, 3).unwrap();
        assert!(report.mean <= 1e-9, "linear model mean TV {}", report.mean);
        assert_eq!(report.per_path.len(), 200);

        let zeros = ParamSet {
            weights: params.weights.iter().map(|w| Tensor::zeros(w.rows, w.cols)).collect(),
            biases: params.biases.clone(),
        };
        let report = tv_complexity(&spec, &zeros, &ds, &pool, 50, 100, 3).unwrap();
        assert_eq!(report.mean, 0.0);
    }

    #[test]
    fn tv_is_invariant_to_affine_wrapping_along_paths() {
        let ds = labeled_blob_data(40, 3, 5);
        let spec = mlp_spec(3, 8, 3);
        let params = init_params(&spec, 7);
        let paths = draw_tv_paths(&ds, &(0..40).collect::<Vec<_>>(), 20, 3, 9).unwrap();
        for path in &paths {
            let p = Path {
                x1: ds.x.data[path.a * 3..path.a * 3 + 3].to_vec(),
                x2: ds.x.data[path.b * 3..path.b * 3 + 3].to_vec(),
                n_points: 100,
            };
            let out = eval(&spec, &params, &p.points()).unwrap();
            let values: Vec<f64> = (0..100).map(|k| out.at(k, path.out_dim)).collect();
            let wrapped: Vec<f64> = values
                .iter()
                .enumerate()
                .map(|(k, v)| v + 3.7 * (k as f64 / 99.0) - 1.3)
                .collect();
            assert!((tv_of_values(&values) - tv_of_values(&wrapped)).abs() <= 1e-9);
        }
    }

    #[test]
    fn refining_the_path_never_decreases_tv() {
        let ds = labeled_blob_data(30, 3, 11);
        let spec = mlp_spec(3, 10, 3);
        let params = init_params(&spec, 13);
        let paths = draw_tv_paths(&ds, &(0..30).collect::<Vec<_>>(), 10, 3, 1).unwrap();
        let coarse = tv_report(&spec, &params, &ds, &paths, 50).unwrap();
        let fine = tv_report(&spec, &params, &ds, &paths, 99).unwrap();
        for (c, f) in coarse.per_path.iter().zip(&fine.per_path) {
            assert!(f >= &(c - 1e-9), "refinement decreased TV: {c} -> {f}");
        }
    }

    #[test]
    fn estimator_is_stable_across_seeds() {
        let ds = labeled_blob_data(100, 4, 17);
        let spec = mlp_spec(4, 12, 3);
        let params = init_params(&spec, 19);
        let pool: Vec<usize> = (0..100).collect();
        let a = tv_complexity(&spec, &params, &ds, &pool, 200, 100, 21).unwrap();
        let b = tv_complexity(&spec, &params, &ds, &pool, 200, 100, 22).unwrap();
        let rel = (a.mean - b.mean).abs() / a.mean.max(b.mean);
        assert!(rel < 0.10, "seed-to-seed relative difference {rel}");
    }

    #[test]
    fn single_label_pool_is_rejected() {
        let mut ds = labeled_blob_data(10, 2, 23);
        ds.targets = Targets::Classes(vec![0; 10]);
        ds.class_count = 1;
        assert!(draw_tv_paths(&ds, &(0..10).collect::<Vec<_>>(), 5, 1, 1).is_err());
    }

    #[test]
    fn linear_model_slice_is_planar() {
        let spec = linear_spec(5, 1);
        let params = init_params(&spec, 3);
        let plane = SlicePlane::AxisPair {
            anchor: vec![0.1; 5],
            dim_m: 1,
            dim_n: 3,
            range: (-1.0, 1.0),
        };
        let slice = input_slice_2d(&spec, &params, &plane, 0, 40).unwrap();
        // f(u,v) affine: value + f(u+du,v+dv) - f(u+du,v) - f(u,v+dv) - f(u,v) == 0
        let res = 40;
        for iu in 0..res - 1 {
            for iv in 0..res - 1 {
                let second_diff = slice.grid[iu * res + iv] + slice.grid[(iu + 1) * res + iv + 1]
                    - slice.grid[(iu + 1) * res + iv]
                    - slice.grid[iu * res + iv + 1];
                assert!(second_diff.abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn degenerate_three_point_plane_is_rejected() {
        let spec = linear_spec(3, 1);
        let params = init_params(&spec, 1);
        let p = vec![0.5, -0.5, 0.25];
        let plane = SlicePlane::ThreePoints { origin: p.clone(), p1: p.clone(), p2: p };
        assert!(input_slice_2d(&spec, &params, &plane, 0, 10).is_err());
        assert!(input_slice_2d(
            &spec,
            &params,
            &SlicePlane::AxisPair { anchor: vec![0.0; 3], dim_m: 2, dim_n: 2, range: (-1.0, 1.0) },
            0,
            10
        )
        .is_err());
    }

    #[test]
    fn default_slice_resolution_gives_forty_thousand_cells() {
        let spec = linear_spec(2, 1);
        let params = init_params(&spec, 2);
        let plane = SlicePlane::AxisPair {
            anchor: vec![0.0, 0.0],
            dim_m: 0,
            dim_n: 1,
            range: (-1.0, 1.0),
        };
        let slice = input_slice_2d(&spec, &params, &plane, 0, SLICE_RES).unwrap();
        assert_eq!(slice.grid.len(), 40_000);
    }

    fn traj_from_flats(spec: &MlpSpec, flats: &[Vec<f64>]) -> Trajectory {
        let base = init_params(spec, 0);
        Trajectory {
            points: flats
                .iter()
                .enumerate()
                .map(|(i, f)| TrajectoryPoint {
                    step: i + 1,
                    params: base.unflatten_like(f),
                    train_loss: 0.0,
                    val_acc: 0.0,
                })
                .collect(),
        }
    }

    #[test]
    fn pca_of_a_straight_line_aligns_with_it() {
        let spec = linear_spec(3, 2);
        let dim = init_params(&spec, 0).flatten().len();
        let mut dir = vec![0.0; dim];
        dir[0] = 0.6;
        dir[2] = 0.8;
        let flats: Vec<Vec<f64>> =
            (0..5).map(|k| dir.iter().map(|v| v * k as f64).collect()).collect();
        let traj = traj_from_flats(&spec, &flats);
        let plane = trajectory_pca(&traj).unwrap();
        let cos: f64 = plane.e1.iter().zip(&dir).map(|(a, b)| a * b).sum::<f64>();
        assert!(cos.abs() >= 1.0 - 1e-8, "alignment {cos}");
        // residual variance along e2 is ~0
        let var2: f64 = plane.projections.iter().map(|p| p.1 * p.1).sum();
        assert!(var2 <= 1e-16);
        // orthonormal within 1e-10
        let dot: f64 = plane.e1.iter().zip(&plane.e2).map(|(a, b)| a * b).sum();
        assert!(dot.abs() <= 1e-10);
        let n2: f64 = plane.e2.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n2 - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn pca_projections_preserve_pairwise_distances_on_planar_trajectories() {
        let spec = linear_spec(3, 2);
        let dim = init_params(&spec, 0).flatten().len();
        let mut a = vec![0.0; dim];
        let mut b = vec![0.0; dim];
        a[1] = 1.0;
        b[4] = 1.0;
        let combos = [(0.0, 0.0), (2.0, 0.5), (-1.0, 1.5)];
        let flats: Vec<Vec<f64>> = combos
            .iter()
            .map(|&(s, t)| a.iter().zip(&b).map(|(x, y)| s * x + t * y).collect())
            .collect();
        let traj = traj_from_flats(&spec, &flats);
        let plane = trajectory_pca(&traj).unwrap();
        for i in 0..3 {
            for j in (i + 1)..3 {
                let full: f64 = flats[i]
                    .iter()
                    .zip(&flats[j])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                let (ui, vi) = plane.projections[i];
                let (uj, vj) = plane.projections[j];
                let proj = ((ui - uj).powi(2) + (vi - vj).powi(2)).sqrt();
                assert!((full - proj).abs() <= 1e-8, "{full} vs {proj}");
            }
        }
    }

    #[test]
    fn rank_deficient_trajectory_is_rejected() {
        let spec = linear_spec(2, 1);
        let p = init_params(&spec, 0).flatten();
        let traj = traj_from_flats(&spec, &[p.clone(), p.clone(), p]);
        assert!(trajectory_pca(&traj).is_err());
    }

    #[test]
    fn zero_extent_landscape_is_flat_and_centered_on_the_train_loss() {
        let ds = labeled_blob_data(30, 3, 31);
        let spec = mlp_spec(3, 6, 3);
        let params = init_params(&spec, 33);
        let dim = params.flatten().len();
        let (e1, e2) = random_plane(dim, 1);
        let rows: Vec<usize> = (0..30).collect();
        let lp = LandscapeParams {
            ds: &ds,
            rows: &rows,
            loss: LossKind::SoftmaxCe,
            tv_paths: &[],
            tv_points: 2,
        };
        let l = landscape(&spec, &params, &e1, &e2, (0.0, 0.0), (0.0, 0.0), LandscapeKind::Loss, &lp)
            .unwrap();
        assert_eq!(l.grid.len(), LANDSCAPE_RES * LANDSCAPE_RES);
        let x = ds.gather_x(&rows);
        let t = target_tensor(&ds, &rows, spec.head).unwrap();
        let pred = eval(&spec, &params, &x).unwrap();
        let center_loss = loss_value(LossKind::SoftmaxCe, &pred, &t).unwrap();
        for cell in &l.grid {
            assert_eq!(*cell, center_loss);
        }
    }
}
