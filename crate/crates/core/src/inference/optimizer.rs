//! Box-constrained minimization: projected BFGS with Armijo backtracking,
//! Newton polishing near the solution, and a bounded Nelder-Mead fallback
//! when the line search stalls.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;

/// Smooth objective with analytic derivatives.
pub trait Objective {
    fn value(&self, x: &DVector<f64>) -> Result<f64>;
    fn value_grad(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)>;
    fn value_grad_hess(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>, DMatrix<f64>)>;
}

#[derive(Debug, Clone, Copy)]
pub struct OptimizerOptions {
    /// Convergence threshold on `‖projected gradient‖_∞ / (1 + |f|)`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        OptimizerOptions {
            tol: 1e-8,
            max_iter: 500,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: DVector<f64>,
    pub f: f64,
    pub grad: DVector<f64>,
    pub projected_grad_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub used_nelder_mead: bool,
}

/// Gradient with components zeroed where a bound blocks descent.
pub fn projected_gradient(
    x: &DVector<f64>,
    g: &DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
) -> DVector<f64> {
    DVector::from_fn(x.len(), |k, _| {
        if (x[k] <= lower[k] && g[k] > 0.0) || (x[k] >= upper[k] && g[k] < 0.0) {
            0.0
        } else {
            g[k]
        }
    })
}

fn clamp(v: &mut DVector<f64>, lower: &DVector<f64>, upper: &DVector<f64>) {
    for k in 0..v.len() {
        v[k] = v[k].clamp(lower[k], upper[k]);
    }
}

/// Inverse-Hessian seed on the free coordinates: `|H_ff|⁻¹` through the
/// eigendecomposition, with tiny eigenvalues floored and zero rows for the
/// blocked coordinates. Falls back to a scaled identity on a non-finite `H`.
fn inverse_metric(h: &DMatrix<f64>, g: &DVector<f64>, free: &[bool]) -> DMatrix<f64> {
    let n = h.nrows();
    let idx: Vec<usize> = (0..n).filter(|&k| free[k]).collect();
    let mut out = DMatrix::zeros(n, n);
    if idx.is_empty() {
        return out;
    }
    let hs = DMatrix::from_fn(idx.len(), idx.len(), |a, b| h[(idx[a], idx[b])]);
    let inv = if hs.iter().all(|v| v.is_finite()) && hs.amax() > 0.0 {
        let eig = hs.symmetric_eigen();
        let floor = 1e-10 * eig.eigenvalues.amax();
        let d = eig.eigenvalues.map(|l| 1.0 / l.abs().max(floor));
        &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
    } else {
        DMatrix::identity(idx.len(), idx.len()) / g.amax().max(1.0)
    };
    for (a, &i) in idx.iter().enumerate() {
        for (b, &j) in idx.iter().enumerate() {
            out[(i, j)] = inv[(a, b)];
        }
    }
    out
}

pub fn minimize<O: Objective>(
    obj: &O,
    x0: &DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    opts: &OptimizerOptions,
) -> Result<Minimum> {
    let n = x0.len();
    let mut x = x0.clone();
    clamp(&mut x, lower, upper);
    let (mut f, mut g, h) = obj.value_grad_hess(&x)?;
    let mut evaluations = 1;
    let free_mask = |x: &DVector<f64>, g: &DVector<f64>| -> Vec<bool> {
        (0..n)
            .map(|k| !((x[k] <= lower[k] && g[k] > 0.0) || (x[k] >= upper[k] && g[k] < 0.0)))
            .collect()
    };
    let mut active = free_mask(&x, &g);
    let mut hinv = inverse_metric(&h, &g, &active);
    let mut used_nm = false;
    let mut iterations = 0;
    let mut converged = false;
    let mut stalls = 0;

    while iterations < opts.max_iter {
        let pg = projected_gradient(&x, &g, lower, upper);
        if f.is_finite() && pg.amax() <= opts.tol * (1.0 + f.abs()) {
            converged = true;
            break;
        }
        iterations += 1;
        let free = free_mask(&x, &g);
        if free != active {
            let (_, _, h) = obj.value_grad_hess(&x)?;
            evaluations += 1;
            hinv = inverse_metric(&h, &g, &free);
            active = free.clone();
        }
        let mut step_taken = false;
        for attempt in 0..2 {
            let mut d = if attempt == 0 {
                let gf = DVector::from_fn(n, |k, _| if free[k] { g[k] } else { 0.0 });
                -(&hinv * gf)
            } else {
                -pg.clone()
            };
            for k in 0..n {
                if !free[k] {
                    d[k] = 0.0;
                }
            }
            if d.dot(&g) >= 0.0 || d.amax() == 0.0 {
                continue;
            }
            // decreases within rounding of f are not progress
            let noise = 8.0 * f64::EPSILON * (1.0 + f.abs());
            let mut alpha = 1.0;
            for _ in 0..60 {
                let mut xn = &x + alpha * &d;
                clamp(&mut xn, lower, upper);
                let fn_ = obj.value(&xn)?;
                evaluations += 1;
                let decrease = g.dot(&(&xn - &x));
                if fn_.is_finite() && fn_ < f - noise && fn_ <= f + 1e-4 * decrease {
                    let (f2, g2) = obj.value_grad(&xn)?;
                    evaluations += 1;
                    let s = &xn - &x;
                    let y = &g2 - &g;
                    let sy = s.dot(&y);
                    if sy > 1e-12 * s.norm() * y.norm() && sy > 0.0 {
                        let rho = 1.0 / sy;
                        let eye = DMatrix::<f64>::identity(n, n);
                        let a = &eye - rho * &s * y.transpose();
                        hinv = &a * &hinv * a.transpose() + rho * &s * s.transpose();
                    }
                    x = xn;
                    f = f2;
                    g = g2;
                    step_taken = true;
                    break;
                }
                alpha *= 0.5;
            }
            if step_taken {
                break;
            }
            // reset the metric before the steepest-descent retry
            let (_, _, h) = obj.value_grad_hess(&x)?;
            evaluations += 1;
            hinv = inverse_metric(&h, &g, &free);
        }
        if !step_taken {
            // Near the optimum f stops resolving decreases; Newton steps judged
            // by the projected gradient still make progress.
            let mut polished = false;
            for _ in 0..3 {
                match newton_step(obj, &x, lower, upper)? {
                    Some((xn, fn_, gn, ev)) => {
                        evaluations += ev;
                        x = xn;
                        f = fn_;
                        g = gn;
                        polished = true;
                    }
                    None => break,
                }
            }
            if polished {
                let pg = projected_gradient(&x, &g, lower, upper);
                if pg.amax() <= opts.tol * (1.0 + f.abs()) {
                    converged = true;
                    break;
                }
                let (_, _, h) = obj.value_grad_hess(&x)?;
                evaluations += 1;
                active = free_mask(&x, &g);
                hinv = inverse_metric(&h, &g, &active);
                continue;
            }
            stalls += 1;
            if stalls > 2 {
                break;
            }
            let nm = nelder_mead(obj, &x, lower, upper, 200 * n)?;
            evaluations += nm.1;
            used_nm = true;
            if nm.0 .1 < f {
                x = nm.0 .0;
            }
            let (f2, g2, h) = obj.value_grad_hess(&x)?;
            evaluations += 1;
            f = f2;
            g = g2;
            active = free_mask(&x, &g);
            hinv = inverse_metric(&h, &g, &active);
        }
    }

    if converged {
        for _ in 0..3 {
            match newton_step(obj, &x, lower, upper)? {
                Some((xn, fn_, gn, ev)) => {
                    evaluations += ev;
                    x = xn;
                    f = fn_;
                    g = gn;
                }
                None => break,
            }
        }
    }

    let pgn = projected_gradient(&x, &g, lower, upper).amax();
    Ok(Minimum {
        converged: converged || (f.is_finite() && pgn <= opts.tol * (1.0 + f.abs())),
        x,
        f,
        grad: g,
        projected_grad_norm: pgn,
        iterations,
        evaluations,
        used_nelder_mead: used_nm,
    })
}

/// One Newton step on the free coordinates, kept only if `f` does not rise
/// beyond rounding and the projected gradient shrinks.
#[allow(clippy::type_complexity)]
fn newton_step<O: Objective>(
    obj: &O,
    x: &DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
) -> Result<Option<(DVector<f64>, f64, DVector<f64>, usize)>> {
    let n = x.len();
    let (f0, g0, h) = obj.value_grad_hess(x)?;
    let free: Vec<usize> = (0..n)
        .filter(|&k| !((x[k] <= lower[k] && g0[k] > 0.0) || (x[k] >= upper[k] && g0[k] < 0.0)))
        .collect();
    if free.is_empty() || !h.iter().all(|v| v.is_finite()) {
        return Ok(None);
    }
    let hs = DMatrix::from_fn(free.len(), free.len(), |a, b| h[(free[a], free[b])]);
    let gs = DVector::from_fn(free.len(), |a, _| g0[free[a]]);
    let Some(chol) = hs.cholesky() else {
        return Ok(None);
    };
    let step = chol.solve(&gs);
    let mut xn = x.clone();
    for (a, &k) in free.iter().enumerate() {
        xn[k] -= step[a];
    }
    clamp(&mut xn, lower, upper);
    let (f1, g1) = obj.value_grad(&xn)?;
    let pg0 = projected_gradient(x, &g0, lower, upper).amax();
    let pg1 = projected_gradient(&xn, &g1, lower, upper).amax();
    if f1.is_finite() && f1 <= f0 + 1e-12 * (1.0 + f0.abs()) && pg1 < pg0 {
        Ok(Some((xn, f1, g1, 2)))
    } else {
        Ok(None)
    }
}

/// Nelder-Mead with vertices clamped into the box. Returns the best vertex,
/// its value, and the number of evaluations.
pub fn nelder_mead<O: Objective>(
    obj: &O,
    x0: &DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    max_iter: usize,
) -> Result<((DVector<f64>, f64), usize)> {
    let n = x0.len();
    let mut evals = 0;
    let mut eval = |v: &DVector<f64>| -> Result<f64> {
        evals += 1;
        let f = obj.value(v)?;
        Ok(if f.is_finite() { f } else { f64::INFINITY })
    };
    let mut simplex: Vec<(DVector<f64>, f64)> = Vec::with_capacity(n + 1);
    let mut start = x0.clone();
    clamp(&mut start, lower, upper);
    let f0 = eval(&start)?;
    simplex.push((start.clone(), f0));
    for k in 0..n {
        let mut v = start.clone();
        let step = 0.05 * (upper[k] - lower[k]);
        v[k] = if v[k] + step <= upper[k] { v[k] + step } else { v[k] - step };
        let f = eval(&v)?;
        simplex.push((v, f));
    }
    for _ in 0..max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let spread = simplex[n].1 - simplex[0].1;
        if spread.abs() <= 1e-14 * (1.0 + simplex[0].1.abs()) {
            break;
        }
        let centroid = simplex[..n]
            .iter()
            .fold(DVector::zeros(n), |acc, (v, _)| acc + v)
            / n as f64;
        let worst = simplex[n].clone();
        let along = |t: f64| -> DVector<f64> {
            let mut v = &centroid + t * (&worst.0 - &centroid);
            clamp(&mut v, lower, upper);
            v
        };
        let xr = along(-1.0);
        let fr = eval(&xr)?;
        if fr < simplex[0].1 {
            let xe = along(-2.0);
            let fe = eval(&xe)?;
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < worst.1 {
                let xc = along(-0.5);
                let fc = eval(&xc)?;
                (xc, fc)
            } else {
                let xc = along(0.5);
                let fc = eval(&xc)?;
                (xc, fc)
            };
            if fc < worst.1.min(fr) {
                simplex[n] = (xc, fc);
            } else {
                let best = simplex[0].0.clone();
                for item in simplex.iter_mut().skip(1) {
                    let v = &best + 0.5 * (&item.0 - &best);
                    let f = eval(&v)?;
                    *item = (v, f);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let best = simplex.swap_remove(0);
    Ok((best, evals))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Rosenbrock, a standard stress test for quasi-Newton methods.
    struct Rosen;

    impl Objective for Rosen {
        fn value(&self, x: &DVector<f64>) -> Result<f64> {
            Ok((1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2))
        }
        fn value_grad(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
            let g = DVector::from_vec(vec![
                -2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]),
                200.0 * (x[1] - x[0] * x[0]),
            ]);
            Ok((self.value(x)?, g))
        }
        fn value_grad_hess(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
            let (f, g) = self.value_grad(x)?;
            let h = DMatrix::from_row_slice(
                2,
                2,
                &[
                    2.0 - 400.0 * x[1] + 1200.0 * x[0] * x[0],
                    -400.0 * x[0],
                    -400.0 * x[0],
                    200.0,
                ],
            );
            Ok((f, g, h))
        }
    }

    #[test]
    fn rosenbrock_interior() {
        let lo = DVector::from_vec(vec![-2.0, -2.0]);
        let hi = DVector::from_vec(vec![2.0, 2.0]);
        let m = minimize(&Rosen, &DVector::from_vec(vec![-1.2, 1.0]), &lo, &hi, &Default::default())
            .unwrap();
        assert!(m.converged);
        assert!((m.x[0] - 1.0).abs() < 1e-8 && (m.x[1] - 1.0).abs() < 1e-8, "{}", m.x);
    }

    #[test]
    fn rosenbrock_with_active_bound() {
        let lo = DVector::from_vec(vec![-2.0, -2.0]);
        let hi = DVector::from_vec(vec![0.5, 2.0]);
        let m = minimize(&Rosen, &DVector::from_vec(vec![-1.2, 1.0]), &lo, &hi, &Default::default())
            .unwrap();
        assert!(m.converged, "{m:?}");
        assert_eq!(m.x[0], 0.5);
        assert!((m.x[1] - 0.25).abs() < 1e-8);
    }

    #[test]
    fn nelder_mead_descends() {
        let lo = DVector::from_vec(vec![-2.0, -2.0]);
        let hi = DVector::from_vec(vec![2.0, 2.0]);
        let ((x, f), _) = nelder_mead(&Rosen, &DVector::from_vec(vec![-1.2, 1.0]), &lo, &hi, 2000).unwrap();
        assert!(f < 1e-8, "{x} {f}");
    }
}
