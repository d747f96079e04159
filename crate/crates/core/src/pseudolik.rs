//! Log-pseudo-likelihood of a pairwise Gibbs model on an estimation window,
//! with analytic gradient and Hessian.
//!
//! ```text
//! LPL(θ)   = −∫_Λ e^{−V(u|φ)} du − Σ_{x∈φ_Λ} V(x|φ∖x)
//! LPL¹(θ)  =  ∫_Λ ∇V(u|φ) e^{−V(u|φ)} du − Σ_{x∈φ_Λ} ∇V(x|φ∖x)
//! LPL²(θ)  =  ∫_Λ (∇²V − ∇V∇Vᵀ)(u|φ) e^{−V(u|φ)} du − Σ_{x∈φ_Λ} ∇²V(x|φ∖x)
//! ```
//!
//! The integral is replaced by a stratified midpoint rule; the point sum is
//! exact. Sums and integrals range over the estimation window Λ while the
//! energies see the whole observed pattern (minus sampling), so the
//! observation window must contain Λ dilated by the interaction range.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{
    dilate, CellPartition, Configuration, Point, SpatialGrid, Window, DUPLICATE_TOLERANCE,
};
use crate::models::{pair_sums, ModelSpec, PairSums, Theta};

/// Energies above this are treated as `+∞` in `e^{−V}`.
pub const UNDERFLOW_ENERGY: f64 = 700.0;

/// Dummy points per interaction range per axis used by default.
pub const DEFAULT_POINTS_PER_RANGE: f64 = 20.0;

/// Stratified midpoint quadrature over a window: one node at the center of
/// each subcell of a regular grid, weighted by the subcell area.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureScheme {
    window: Window,
    resolution: f64,
    nx: usize,
    ny: usize,
    points: Vec<Point>,
    weights: Vec<f64>,
}

impl QuadratureScheme {
    /// `resolution` is the number of nodes per unit length along each axis;
    /// the actual spacing is adjusted so the grid tiles `window` exactly.
    pub fn stratified(window: &Window, resolution: f64) -> Result<Self> {
        if !(resolution > 0.0) || !resolution.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "quadrature resolution must be positive, got {resolution}"
            )));
        }
        let nx = ((window.width() * resolution).round() as usize).max(1);
        let ny = ((window.height() * resolution).round() as usize).max(1);
        let hx = window.width() / nx as f64;
        let hy = window.height() / ny as f64;
        let mut points = Vec::with_capacity(nx * ny);
        for i in 0..nx {
            let x = window.x_min() + (i as f64 + 0.5) * hx;
            for j in 0..ny {
                points.push(Point::new(x, window.y_min() + (j as f64 + 0.5) * hy));
            }
        }
        let weights = vec![hx * hy; nx * ny];
        Ok(QuadratureScheme {
            window: *window,
            resolution,
            nx,
            ny,
            points,
            weights,
        })
    }

    /// [`DEFAULT_POINTS_PER_RANGE`] nodes per interaction range; four per unit
    /// length for the Poisson model, whose integrand is constant.
    pub fn default_for(spec: &ModelSpec, window: &Window) -> Result<Self> {
        QuadratureScheme::stratified(window, default_resolution(spec))
    }

    /// Same window, twice the resolution.
    pub fn refined(&self) -> Result<Self> {
        QuadratureScheme::stratified(&self.window, 2.0 * self.resolution)
    }

    pub fn window(&self) -> &Window {
        &self.window
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn grid_shape(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn translate(&self, dx: f64, dy: f64) -> QuadratureScheme {
        QuadratureScheme {
            window: self.window.translate(dx, dy),
            points: self.points.iter().map(|p| p.translate(dx, dy)).collect(),
            ..self.clone()
        }
    }
}

pub fn default_resolution(spec: &ModelSpec) -> f64 {
    let range = spec.interaction_range();
    if range > 0.0 && range.is_finite() {
        DEFAULT_POINTS_PER_RANGE / range
    } else {
        4.0
    }
}

/// Checks the minus-sampling requirement: the observed window must contain the
/// estimation window dilated by the interaction range.
pub fn check_observation_regime(
    cfg: &Configuration,
    spec: &ModelSpec,
    estimation_window: &Window,
) -> Result<()> {
    let range = spec.interaction_range();
    let needed = dilate(estimation_window, range)?;
    if !cfg.window().contains_window(&needed, 1e-9) {
        return Err(Error::BorderCorrection(format!(
            "observation window {} must contain {} (estimation window {} dilated by {})",
            cfg.window(),
            needed,
            estimation_window,
            range
        )));
    }
    Ok(())
}

/// Gradient of the log-pseudo-likelihood split into its integral and sum
/// terms, and per cell of a partition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreBreakdown {
    /// `∫_Λ ∇V e^{−V}`
    pub integral_term: Vec<f64>,
    /// `Σ_{x∈φ_Λ} ∇V(x|φ∖x)`; the gradient is `integral_term − sum_term`.
    pub sum_term: Vec<f64>,
    pub per_cell: Vec<CellScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellScore {
    pub index: (i64, i64),
    /// `LPL¹_{Δᵢ}`
    pub score: Vec<f64>,
}

impl ScoreBreakdown {
    pub fn total(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.integral_term.len(),
            self.integral_term.iter().zip(&self.sum_term).map(|(a, b)| a - b),
        )
    }
}

#[derive(Debug, Clone, Copy)]
struct Node {
    weight: f64,
    sums: PairSums,
}

/// Per-cell partial sums.
#[derive(Debug, Clone, Copy, Default)]
struct Accum {
    integral: f64,
    point_sum: f64,
    integral_grad: [f64; 3],
    sum_grad: [f64; 3],
    integral_hess: [[f64; 3]; 3],
    sum_hess: [[f64; 3]; 3],
}

impl Accum {
    fn add(&mut self, o: &Accum) {
        self.integral += o.integral;
        self.point_sum += o.point_sum;
        for j in 0..3 {
            self.integral_grad[j] += o.integral_grad[j];
            self.sum_grad[j] += o.sum_grad[j];
            for k in 0..3 {
                self.integral_hess[j][k] += o.integral_hess[j][k];
                self.sum_hess[j][k] += o.sum_hess[j][k];
            }
        }
    }
}

/// Value, gradient and (optionally) Hessian of the log-pseudo-likelihood.
#[derive(Debug, Clone)]
pub struct PlEvaluation {
    pub value: f64,
    pub grad: DVector<f64>,
    pub hess: Option<DMatrix<f64>>,
    pub breakdown: ScoreBreakdown,
}

/// Log-pseudo-likelihood with the neighbor sums of every quadrature node and
/// every data point precomputed, so each θ costs one pass over flat arrays.
#[derive(Debug, Clone)]
pub struct PseudoLikelihood {
    spec: ModelSpec,
    window: Window,
    dummies: Vec<Node>,
    data: Vec<Node>,
    /// Node ranges per cell, in partition order.
    dummy_cells: Vec<Range<usize>>,
    data_cells: Vec<Range<usize>>,
    cell_index: Vec<(i64, i64)>,
    n_data: usize,
}

/// Below this many nodes per cell a cell is evaluated in one piece.
const CHUNK: usize = 8192;

impl PseudoLikelihood {
    /// Precomputes neighbor sums. With `partition`, per-cell scores are
    /// available in the breakdown; without, the whole window is one cell.
    pub fn new(
        cfg: &Configuration,
        spec: &ModelSpec,
        estimation_window: &Window,
        quad: &QuadratureScheme,
        partition: Option<&CellPartition>,
    ) -> Result<Self> {
        spec.validate()?;
        if !quad.window().contains_window(estimation_window, 1e-9)
            || !estimation_window.contains_window(quad.window(), 1e-9)
        {
            return Err(Error::InvalidArgument(format!(
                "quadrature window {} differs from the estimation window {}",
                quad.window(),
                estimation_window
            )));
        }
        if let Some(p) = partition {
            if p.window() != estimation_window
                && !(p.window().contains_window(estimation_window, 1e-9)
                    && estimation_window.contains_window(p.window(), 1e-9))
            {
                return Err(Error::InvalidArgument(format!(
                    "partition window {} differs from the estimation window {}",
                    p.window(),
                    estimation_window
                )));
            }
        }
        check_observation_regime(cfg, spec, estimation_window)?;

        let range = spec.interaction_range();
        let cell = if range > 0.0 { range } else { 1.0 };
        let grid = SpatialGrid::build(cfg, cell)?;
        let n_cells = partition.map_or(1, |p| p.len());
        let cell_of = |p: &Point| -> usize {
            partition.map_or(0, |part| part.cell_of(p).unwrap_or(0))
        };

        let tol2 = DUPLICATE_TOLERANCE * DUPLICATE_TOLERANCE;
        let range2 = range * range;
        let mut dummy_tagged: Vec<(usize, Node)> = quad
            .points()
            .par_iter()
            .zip(quad.weights().par_iter())
            .map(|(u, &w)| {
                // A node sitting on a data point sees it at the duplicate
                // tolerance, which drives e^{−V} to zero for repulsive cores.
                let mut sums = PairSums::default();
                grid.for_each_within(u, range, |_, _, d2| {
                    if d2 <= range2 {
                        sums.add_pair(d2.max(tol2));
                    }
                });
                (cell_of(u), Node { weight: w, sums })
            })
            .collect();

        let mut data_tagged = Vec::new();
        for (i, x) in cfg.points().iter().enumerate() {
            if estimation_window.contains(x) {
                let sums = pair_sums(spec, x, &grid, Some(i))?;
                data_tagged.push((cell_of(x), Node { weight: 1.0, sums }));
            }
        }
        let n_data = data_tagged.len();

        let (dummies, dummy_cells) = group_by_cell(&mut dummy_tagged, n_cells);
        let (data, data_cells) = group_by_cell(&mut data_tagged, n_cells);
        let cell_index = match partition {
            Some(p) => p.index_set().to_vec(),
            None => vec![(0, 0)],
        };
        Ok(PseudoLikelihood {
            spec: spec.clone(),
            window: *estimation_window,
            dummies,
            data,
            dummy_cells,
            data_cells,
            cell_index,
            n_data,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn window(&self) -> &Window {
        &self.window
    }

    pub fn area(&self) -> f64 {
        self.window.area()
    }

    /// Number of data points inside the estimation window.
    pub fn n_points(&self) -> usize {
        self.n_data
    }

    pub fn n_cells(&self) -> usize {
        self.cell_index.len()
    }

    fn accumulate_dummies(&self, theta: &[f64], nodes: &[Node], hess: bool) -> Accum {
        let p = self.spec.dim();
        let mut acc = Accum::default();
        for node in nodes {
            let t = self.spec.energy_terms(theta, &node.sums);
            if !(t.value <= UNDERFLOW_ENERGY) {
                continue;
            }
            let w = node.weight * (-t.value).exp();
            acc.integral += w;
            for j in 0..p {
                acc.integral_grad[j] += w * t.grad[j];
            }
            if hess {
                for j in 0..p {
                    for k in 0..=j {
                        acc.integral_hess[j][k] += w * (t.hess[j][k] - t.grad[j] * t.grad[k]);
                    }
                }
            }
        }
        acc
    }

    fn accumulate_data(&self, theta: &[f64], nodes: &[Node], hess: bool) -> Accum {
        let p = self.spec.dim();
        let mut acc = Accum::default();
        for node in nodes {
            let t = self.spec.energy_terms(theta, &node.sums);
            acc.point_sum += t.value;
            for j in 0..p {
                acc.sum_grad[j] += t.grad[j];
            }
            if hess {
                for j in 0..p {
                    for k in 0..=j {
                        acc.sum_hess[j][k] += t.hess[j][k];
                    }
                }
            }
        }
        acc
    }

    fn cell_accum(&self, theta: &[f64], c: usize, hess: bool) -> Accum {
        let dummies = &self.dummies[self.dummy_cells[c].clone()];
        let mut acc = if dummies.len() > CHUNK {
            let parts: Vec<Accum> = dummies
                .par_chunks(CHUNK)
                .map(|chunk| self.accumulate_dummies(theta, chunk, hess))
                .collect();
            let mut acc = Accum::default();
            for part in &parts {
                acc.add(part);
            }
            acc
        } else {
            self.accumulate_dummies(theta, dummies, hess)
        };
        acc.add(&self.accumulate_data(theta, &self.data[self.data_cells[c].clone()], hess));
        acc
    }

    /// Evaluates LPL, its gradient and, when `with_hessian`, its Hessian.
    /// Reductions run in a fixed order, so results do not depend on the
    /// number of threads.
    pub fn evaluate(&self, theta: &Theta, with_hessian: bool) -> Result<PlEvaluation> {
        self.spec.check_theta(theta)?;
        let th = theta.as_slice();
        let p = self.spec.dim();
        let cells: Vec<Accum> = (0..self.n_cells())
            .into_par_iter()
            .map(|c| self.cell_accum(th, c, with_hessian))
            .collect();
        let mut total = Accum::default();
        for c in &cells {
            total.add(c);
        }
        let value = -total.integral - total.point_sum;
        let grad = DVector::from_fn(p, |j, _| total.integral_grad[j] - total.sum_grad[j]);
        let hess = with_hessian.then(|| {
            DMatrix::from_fn(p, p, |j, k| {
                let (a, b) = if k <= j { (j, k) } else { (k, j) };
                total.integral_hess[a][b] - total.sum_hess[a][b]
            })
        });
        let per_cell = cells
            .iter()
            .zip(&self.cell_index)
            .map(|(c, &index)| CellScore {
                index,
                score: (0..p).map(|j| c.integral_grad[j] - c.sum_grad[j]).collect(),
            })
            .collect();
        let breakdown = ScoreBreakdown {
            integral_term: total.integral_grad[..p].to_vec(),
            sum_term: total.sum_grad[..p].to_vec(),
            per_cell,
        };
        Ok(PlEvaluation {
            value,
            grad,
            hess,
            breakdown,
        })
    }

    /// LPL only.
    pub fn value(&self, theta: &Theta) -> Result<f64> {
        self.spec.check_theta(theta)?;
        let th = theta.as_slice();
        let parts: Vec<(f64, f64)> = (0..self.n_cells())
            .into_par_iter()
            .map(|c| {
                let mut integral = 0.0;
                for node in &self.dummies[self.dummy_cells[c].clone()] {
                    let v = self.spec.energy_terms(th, &node.sums).value;
                    if v <= UNDERFLOW_ENERGY {
                        integral += node.weight * (-v).exp();
                    }
                }
                let point_sum: f64 = self.data[self.data_cells[c].clone()]
                    .iter()
                    .map(|n| self.spec.energy_terms(th, &n.sums).value)
                    .sum();
                (integral, point_sum)
            })
            .collect();
        Ok(parts.iter().map(|(i, s)| -i - s).sum())
    }
}

/// Stable-sorts tagged nodes by cell and returns them with per-cell ranges.
fn group_by_cell(tagged: &mut [(usize, Node)], n_cells: usize) -> (Vec<Node>, Vec<Range<usize>>) {
    tagged.sort_by_key(|(c, _)| *c);
    let nodes = tagged.iter().map(|(_, n)| *n).collect();
    let mut ranges = Vec::with_capacity(n_cells);
    let mut start = 0;
    for c in 0..n_cells {
        let end = start + tagged[start..].iter().take_while(|(k, _)| *k == c).count();
        ranges.push(start..end);
        start = end;
    }
    (nodes, ranges)
}

/// Log-pseudo-likelihood on `estimation_window`.
pub fn log_pl(
    cfg: &Configuration,
    spec: &ModelSpec,
    theta: &Theta,
    estimation_window: &Window,
    quad: &QuadratureScheme,
) -> Result<f64> {
    PseudoLikelihood::new(cfg, spec, estimation_window, quad, None)?.value(theta)
}

/// Gradient of [`log_pl`] with its decomposition. Per-cell scores are
/// reported when a partition is supplied.
pub fn grad_log_pl(
    cfg: &Configuration,
    spec: &ModelSpec,
    theta: &Theta,
    estimation_window: &Window,
    quad: &QuadratureScheme,
    partition: Option<&CellPartition>,
) -> Result<(DVector<f64>, ScoreBreakdown)> {
    let e = PseudoLikelihood::new(cfg, spec, estimation_window, quad, partition)?
        .evaluate(theta, false)?;
    Ok((e.grad, e.breakdown))
}

/// Hessian of [`log_pl`]; symmetric by construction.
pub fn hess_log_pl(
    cfg: &Configuration,
    spec: &ModelSpec,
    theta: &Theta,
    estimation_window: &Window,
    quad: &QuadratureScheme,
) -> Result<DMatrix<f64>> {
    let e = PseudoLikelihood::new(cfg, spec, estimation_window, quad, None)?.evaluate(theta, true)?;
    Ok(e.hess.expect("hessian requested"))
}

/// `U_n = −LPL / |Λ|`.
pub fn u_n(
    cfg: &Configuration,
    spec: &ModelSpec,
    theta: &Theta,
    estimation_window: &Window,
    quad: &QuadratureScheme,
) -> Result<f64> {
    Ok(-log_pl(cfg, spec, theta, estimation_window, quad)? / estimation_window.area())
}

/// `U_n¹ = −LPL¹ / |Λ|`.
pub fn u_n1(
    cfg: &Configuration,
    spec: &ModelSpec,
    theta: &Theta,
    estimation_window: &Window,
    quad: &QuadratureScheme,
) -> Result<DVector<f64>> {
    let (g, _) = grad_log_pl(cfg, spec, theta, estimation_window, quad, None)?;
    Ok(-g / estimation_window.area())
}

/// `U_n² = −LPL² / |Λ|`.
pub fn u_n2(
    cfg: &Configuration,
    spec: &ModelSpec,
    theta: &Theta,
    estimation_window: &Window,
    quad: &QuadratureScheme,
) -> Result<DMatrix<f64>> {
    Ok(-hess_log_pl(cfg, spec, theta, estimation_window, quad)? / estimation_window.area())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_partition, erode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn theta(v: &[f64]) -> Theta {
        Theta::new(v.to_vec()).unwrap()
    }

    fn uniform(rng: &mut ChaCha8Rng, n: usize, w: Window) -> Configuration {
        let pts = (0..n)
            .map(|_| {
                Point::new(
                    rng.random_range(w.x_min()..w.x_max()),
                    rng.random_range(w.y_min()..w.y_max()),
                )
            })
            .collect();
        Configuration::new(pts, w).unwrap()
    }

    #[test]
    fn quadrature_weights_sum_to_area() {
        let w = Window::new(0.3, 7.1, -2.0, 1.7).unwrap();
        for res in [0.5, 3.0, 17.3] {
            let q = QuadratureScheme::stratified(&w, res).unwrap();
            let s: f64 = q.weights().iter().sum();
            assert!((s - w.area()).abs() <= 1e-10 * w.area());
            assert!(q.points().iter().all(|p| w.contains(p)));
        }
        assert!(QuadratureScheme::stratified(&w, 0.0).is_err());
    }

    #[test]
    fn poisson_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Window::square(3.0).unwrap();
        let cfg = uniform(&mut rng, 17, w);
        let q = QuadratureScheme::default_for(&ModelSpec::Poisson, &w).unwrap();
        let t1 = 0.37;
        let v = log_pl(&cfg, &ModelSpec::Poisson, &theta(&[t1]), &w, &q).unwrap();
        let exact = -9.0 * (-t1).exp() - 17.0 * t1;
        assert!((v - exact).abs() < 1e-12 * exact.abs());

        let (g, b) = grad_log_pl(&cfg, &ModelSpec::Poisson, &theta(&[t1]), &w, &q, None).unwrap();
        assert!((g[0] - (9.0 * (-t1).exp() - 17.0)).abs() < 1e-12);
        assert_eq!(b.sum_term, vec![17.0]);
        let h = hess_log_pl(&cfg, &ModelSpec::Poisson, &theta(&[t1]), &w, &q).unwrap();
        assert!((h[(0, 0)] + 9.0 * (-t1).exp()).abs() < 1e-12);
        let u2 = u_n2(&cfg, &ModelSpec::Poisson, &theta(&[t1]), &w, &q).unwrap();
        assert!((u2[(0, 0)] - (-t1).exp()).abs() < 1e-12);

        let root = theta(&[-(17.0f64 / 9.0).ln()]);
        let u1 = u_n1(&cfg, &ModelSpec::Poisson, &root, &w, &q).unwrap();
        assert!(u1[0].abs() < 1e-12);
    }

    #[test]
    fn empty_configuration_value() {
        let w = Window::square(1.0).unwrap();
        let cfg = Configuration::empty(w);
        let q = QuadratureScheme::default_for(&ModelSpec::Poisson, &w).unwrap();
        let v = log_pl(&cfg, &ModelSpec::Poisson, &theta(&[0.0]), &w, &q).unwrap();
        assert!((v + 1.0).abs() < 1e-14);
        let spec = ModelSpec::strauss(0.1).unwrap();
        let big = Window::new(-0.1, 1.1, -0.1, 1.1).unwrap();
        let (_, b) =
            grad_log_pl(&Configuration::empty(big), &spec, &theta(&[0.0, 1.0]), &w, &QuadratureScheme::stratified(&w, 10.0).unwrap(), None)
                .unwrap();
        assert_eq!(b.sum_term, vec![0.0, 0.0]);
        let un = u_n(&cfg, &ModelSpec::Poisson, &theta(&[0.0]), &w, &q).unwrap();
        assert!((un - 1.0).abs() < 1e-14);
    }

    #[test]
    fn border_correction_enforced() {
        let obs = Window::square(4.0).unwrap();
        let cfg = Configuration::empty(obs);
        let spec = ModelSpec::lennard_jones(0.5).unwrap();
        let est = Window::new(0.25, 3.75, 0.25, 3.75).unwrap();
        let q = QuadratureScheme::default_for(&spec, &est).unwrap();
        let r = log_pl(&cfg, &spec, &theta(&[0.0, 1.0, 0.2]), &est, &q);
        match r {
            Err(Error::BorderCorrection(msg)) => assert!(msg.contains("dilated by 0.5"), "{msg}"),
            other => panic!("{other:?}"),
        }
        let est = erode(&obs, 0.5).unwrap();
        let q = QuadratureScheme::default_for(&spec, &est).unwrap();
        assert!(log_pl(&cfg, &spec, &theta(&[0.0, 1.0, 0.2]), &est, &q).is_ok());
    }

    /// Fine-grid oracle for LPL evaluated independently: direct double loop
    /// over a midpoint grid with ~10⁶ nodes and brute-force energies.
    fn brute_lpl(pts: &[Point], est: &Window, n_side: usize, th: &[f64], d: f64) -> f64 {
        let energy = |u: &Point, skip: Option<usize>| -> f64 {
            let mut v = th[0];
            for (i, y) in pts.iter().enumerate() {
                if Some(i) == skip {
                    continue;
                }
                let r = u.dist(y);
                if r <= d {
                    let s6 = (th[2] / r).powi(6);
                    v += 4.0 * th[1] * (s6 * s6 - s6);
                }
            }
            v
        };
        let hx = est.width() / n_side as f64;
        let hy = est.height() / n_side as f64;
        let mut integral = 0.0;
        for i in 0..n_side {
            for j in 0..n_side {
                let u = Point::new(
                    est.x_min() + (i as f64 + 0.5) * hx,
                    est.y_min() + (j as f64 + 0.5) * hy,
                );
                integral += (-energy(&u, None)).exp() * hx * hy;
            }
        }
        let s: f64 = pts
            .iter()
            .enumerate()
            .filter(|(_, p)| est.contains(p))
            .map(|(i, p)| energy(p, Some(i)))
            .sum();
        -integral - s
    }

    #[test]
    fn two_point_lj_matches_fine_grid_oracle() {
        let d = 0.25;
        let spec = ModelSpec::lennard_jones(d).unwrap();
        let est = Window::square(1.0).unwrap();
        let obs = dilate(&est, d).unwrap();
        let th = [0.2, 1.0, 0.1];
        let pts = vec![Point::new(0.45, 0.5), Point::new(0.55, 0.5)];
        let cfg = Configuration::new(pts.clone(), obs).unwrap();
        let oracle = brute_lpl(&pts, &est, 1024, &th, d);
        let q = QuadratureScheme::stratified(&est, 400.0).unwrap();
        let v = log_pl(&cfg, &spec, &theta(&th), &est, &q).unwrap();
        assert!((v - oracle).abs() <= 1e-4 * oracle.abs(), "{v} vs {oracle}");
    }

    fn lj_setup(seed: u64) -> (Configuration, ModelSpec, Window, QuadratureScheme) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = ModelSpec::lennard_jones(0.3).unwrap();
        let est = Window::square(1.8).unwrap();
        let obs = dilate(&est, 0.3).unwrap();
        let cfg = uniform(&mut rng, 25, obs);
        let q = QuadratureScheme::default_for(&spec, &est).unwrap();
        (cfg, spec, est, q)
    }

    #[test]
    fn gradient_and_hessian_match_finite_differences() {
        for seed in 0..5 {
            let (cfg, spec, est, q) = lj_setup(seed);
            let pl = PseudoLikelihood::new(&cfg, &spec, &est, &q, None).unwrap();
            let th = [0.3, 0.8, 0.12];
            let e = pl.evaluate(&theta(&th), true).unwrap();
            let h = e.hess.as_ref().unwrap();
            for k in 0..3 {
                let step = 1e-5 * th[k].abs().max(0.1);
                let mut up = th;
                let mut dn = th;
                up[k] += step;
                dn[k] -= step;
                let fd = (pl.value(&theta(&up)).unwrap() - pl.value(&theta(&dn)).unwrap()) / (2.0 * step);
                let scale = e.grad.amax().max(1e-8);
                assert!((fd - e.grad[k]).abs() <= 1e-6 * scale, "grad {k}: {fd} vs {}", e.grad[k]);
                let gu = pl.evaluate(&theta(&up), false).unwrap().grad;
                let gd = pl.evaluate(&theta(&dn), false).unwrap().grad;
                let col = (gu - gd) / (2.0 * step);
                let hscale = h.amax();
                for j in 0..3 {
                    assert!((col[j] - h[(j, k)]).abs() <= 1e-5 * hscale, "hess ({j},{k})");
                }
            }
            assert_eq!(h.transpose(), *h);
        }
    }

    #[test]
    fn strauss_u2_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = ModelSpec::strauss(0.15).unwrap();
        let est = Window::square(2.0).unwrap();
        let obs = dilate(&est, 0.15).unwrap();
        let cfg = uniform(&mut rng, 60, obs);
        let q = QuadratureScheme::default_for(&spec, &est).unwrap();
        for th in [[0.0, 0.5], [-1.0, 2.0], [1.0, -0.3]] {
            let u2 = u_n2(&cfg, &spec, &theta(&th), &est, &q).unwrap();
            let eig = u2.clone().symmetric_eigen().eigenvalues;
            assert!(eig.iter().all(|&l| l >= -1e-12), "{eig}");
            assert_eq!(u2[(0, 1)], u2[(1, 0)]);
        }
    }

    #[test]
    fn per_cell_scores_add_up() {
        let (cfg, spec, _, _) = lj_setup(4);
        let est = Window::new(0.0, 1.8, 0.0, 1.8).unwrap();
        let part = build_partition(&est, 0.3).unwrap();
        let q = QuadratureScheme::default_for(&spec, &est).unwrap();
        let th = theta(&[0.1, 0.9, 0.15]);
        let (whole, _) = grad_log_pl(&cfg, &spec, &th, &est, &q, None).unwrap();
        let (_, b) = grad_log_pl(&cfg, &spec, &th, &est, &q, Some(&part)).unwrap();
        assert_eq!(b.per_cell.len(), 36);
        for j in 0..3 {
            let s: f64 = b.per_cell.iter().map(|c| c.score[j]).sum();
            assert!((s - whole[j]).abs() <= 1e-10 * whole[j].abs().max(1.0));
        }
    }

    #[test]
    fn translation_leaves_value_unchanged() {
        let (cfg, spec, est, q) = lj_setup(2);
        let th = theta(&[0.1, 0.9, 0.15]);
        let a = log_pl(&cfg, &spec, &th, &est, &q).unwrap();
        let (dx, dy) = (3.25, -7.5);
        let b = log_pl(
            &cfg.translate(dx, dy),
            &spec,
            &th,
            &est.translate(dx, dy),
            &q.translate(dx, dy),
        )
        .unwrap();
        assert!((a - b).abs() <= 1e-12 * a.abs());
    }

    #[test]
    fn refinement_converges() {
        let (cfg, spec, est, q) = lj_setup(7);
        let th = theta(&[0.1, 0.9, 0.15]);
        let v1 = log_pl(&cfg, &spec, &th, &est, &q).unwrap();
        let q2 = q.refined().unwrap();
        let v2 = log_pl(&cfg, &spec, &th, &est, &q2).unwrap();
        let v3 = log_pl(&cfg, &spec, &th, &est, &q2.refined().unwrap()).unwrap();
        assert!((v3 - v2).abs() < (v2 - v1).abs());
    }
}
