//! Maximum pseudo-likelihood estimation over a parameter box, the block
//! estimate of the score covariance, the sandwich covariance and normal
//! confidence intervals.

pub mod optimizer;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::ser::SerializeStruct;
use serde::{Serialize, Serializer};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::geometry::{build_partition, CellPartition, Configuration, Window};
use crate::models::{ModelSpec, ParameterBox, Theta};
use crate::pseudolik::{PseudoLikelihood, QuadratureScheme};
use optimizer::{minimize, Objective, OptimizerOptions};

/// Relative eigenvalue cutoff below which `U²` is treated as singular.
pub const EIGEN_CUTOFF: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    /// Box center plus `starts − 1` Latin-hypercube draws.
    pub starts: usize,
    pub tol: f64,
    pub max_iter: usize,
    /// Seeds the Latin-hypercube starts.
    pub seed: u64,
    pub level: f64,
    pub compute_ci: bool,
    /// Side of the cells used for the score covariance. Defaults to the
    /// interaction range, or 1 for the Poisson model.
    pub cell_side: Option<f64>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            starts: 5,
            tol: 1e-8,
            max_iter: 500,
            seed: 0,
            level: 0.95,
            compute_ci: true,
            cell_side: None,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.starts == 0 {
            return Err(Error::InvalidArgument("at least one start is required".into()));
        }
        if !(self.tol > 0.0) || !self.tol.is_finite() {
            return Err(Error::InvalidArgument(format!("tolerance must be positive, got {}", self.tol)));
        }
        check_level(self.level)?;
        if let Some(c) = self.cell_side {
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::InvalidArgument(format!("cell side must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

fn check_level(level: f64) -> Result<()> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "confidence level must lie in (0, 1), got {level}"
        )));
    }
    Ok(())
}

/// Cell side used when none is given.
pub fn default_cell_side(spec: &ModelSpec) -> f64 {
    let range = spec.interaction_range();
    if range > 0.0 && range.is_finite() {
        range
    } else {
        1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimizerReport {
    pub iterations: usize,
    pub converged: bool,
    pub restarts: usize,
    pub evaluations: usize,
    pub nelder_mead_used: bool,
    /// Final `U_n` of every start, in start order.
    pub start_values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfidenceIntervals {
    pub level: f64,
    pub intervals: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sandwich {
    pub cov: DMatrix<f64>,
    pub u2_condition: f64,
    /// Largest magnitude of a negative eigenvalue of `Σ̂` set to zero.
    pub psd_clipping: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub theta_hat: Theta,
    pub log_pl_value: f64,
    /// `U_n(θ̂) = −LPL(θ̂)/|Λ|`
    pub u_n_value: f64,
    /// Sup norm of the projected gradient of `U_n` at `θ̂`.
    pub grad_norm: f64,
    pub u2_matrix: DMatrix<f64>,
    pub sigma_hat: Option<DMatrix<f64>>,
    pub sandwich_cov: Option<DMatrix<f64>>,
    pub ci: Option<ConfidenceIntervals>,
    pub optimizer: OptimizerReport,
    pub on_boundary: bool,
    pub u2_condition: f64,
    pub psd_clipping: Option<f64>,
    pub n_points: usize,
    pub area: f64,
    pub cells: Option<(usize, usize)>,
    pub warnings: Vec<String>,
}

impl FitResult {
    /// Standard errors `√cov_kk`, when the covariance was computed.
    pub fn standard_errors(&self) -> Option<Vec<f64>> {
        self.sandwich_cov
            .as_ref()
            .map(|c| (0..c.nrows()).map(|k| c[(k, k)].max(0.0).sqrt()).collect())
    }

    /// Intervals at another level from the stored covariance.
    pub fn intervals_at(&self, level: f64) -> Result<ConfidenceIntervals> {
        let cov = self.sandwich_cov.as_ref().ok_or_else(|| {
            Error::InvalidArgument("the fit was run without the covariance stage".into())
        })?;
        Ok(confidence_intervals(&self.theta_hat, cov, level)?.0)
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

#[derive(Serialize)]
struct Diagnostics<'a> {
    log_pl: f64,
    u_n: f64,
    grad_norm: f64,
    u2: Vec<Vec<f64>>,
    u2_condition: f64,
    sigma_hat: Option<Vec<Vec<f64>>>,
    psd_clipping: Option<f64>,
    optimizer: &'a OptimizerReport,
    on_boundary: bool,
    n_points: usize,
    area: f64,
    cells: Option<(usize, usize)>,
    warnings: &'a [String],
}

impl Serialize for FitResult {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("FitResult", 4)?;
        st.serialize_field("theta_hat", self.theta_hat.as_slice())?;
        st.serialize_field("cov", &self.sandwich_cov.as_ref().map(rows))?;
        st.serialize_field("ci", &self.ci)?;
        st.serialize_field(
            "diagnostics",
            &Diagnostics {
                log_pl: self.log_pl_value,
                u_n: self.u_n_value,
                grad_norm: self.grad_norm,
                u2: rows(&self.u2_matrix),
                u2_condition: self.u2_condition,
                sigma_hat: self.sigma_hat.as_ref().map(rows),
                psd_clipping: self.psd_clipping,
                optimizer: &self.optimizer,
                on_boundary: self.on_boundary,
                n_points: self.n_points,
                area: self.area,
                cells: self.cells,
                warnings: &self.warnings,
            },
        )?;
        st.end()
    }
}

/// `U_n = −LPL/|Λ|` as an optimizer objective.
struct Contrast<'a> {
    pl: &'a PseudoLikelihood,
    area: f64,
}

impl Objective for Contrast<'_> {
    fn value(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(-self.pl.value(&Theta::from(x))? / self.area)
    }

    fn value_grad(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let e = self.pl.evaluate(&Theta::from(x), false)?;
        Ok((-e.value / self.area, -e.grad / self.area))
    }

    fn value_grad_hess(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        let e = self.pl.evaluate(&Theta::from(x), true)?;
        let h = e.hess.expect("hessian requested");
        Ok((-e.value / self.area, -e.grad / self.area, -h / self.area))
    }
}

/// Refuses interval estimation for models without a finite interaction range.
pub fn check_intervals_supported(spec: &ModelSpec) -> Result<()> {
    if spec.is_finite_range() {
        return Ok(());
    }
    Err(Error::Refused(
        "confidence intervals are only available for finite-range models: asymptotic \
         normality of the estimator holds only for the finite-range Lennard-Jones model, \
         not for D = inf. Refit with a finite D or without confidence intervals."
            .into(),
    ))
}

/// Box center followed by `starts − 1` Latin-hypercube points.
fn start_points(bx: &ParameterBox, starts: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut out = vec![bx.center().to_dvector()];
    let m = starts.saturating_sub(1);
    if m == 0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (bx.lower_vec(), bx.upper_vec());
    let strata: Vec<Vec<usize>> = (0..bx.dim())
        .map(|_| {
            let mut s: Vec<usize> = (0..m).collect();
            s.shuffle(&mut rng);
            s
        })
        .collect();
    for i in 0..m {
        out.push(DVector::from_fn(bx.dim(), |k, _| {
            let u = (strata[k][i] as f64 + rng.random::<f64>()) / m as f64;
            lo[k] + u * (hi[k] - lo[k])
        }));
    }
    out
}

/// Maximizes the log-pseudo-likelihood over `bx`, i.e. minimizes `U_n`,
/// and, unless disabled, computes the sandwich covariance and confidence
/// intervals at the estimate.
pub fn fit_mple(
    cfg: &Configuration,
    spec: &ModelSpec,
    bx: &ParameterBox,
    estimation_window: &Window,
    quad: &QuadratureScheme,
    opts: &FitOptions,
) -> Result<FitResult> {
    spec.validate()?;
    bx.validate_for(spec)?;
    opts.validate()?;
    if opts.compute_ci {
        check_intervals_supported(spec)?;
    }
    let partition = if opts.compute_ci {
        let side = opts.cell_side.unwrap_or_else(|| default_cell_side(spec));
        if side < spec.interaction_range() {
            return Err(Error::InvalidArgument(format!(
                "cell side {side} is smaller than the interaction range {}",
                spec.interaction_range()
            )));
        }
        Some(build_partition(estimation_window, side)?)
    } else {
        None
    };
    let pl = PseudoLikelihood::new(cfg, spec, estimation_window, quad, partition.as_ref())?;
    let area = estimation_window.area();
    let obj = Contrast { pl: &pl, area };
    let (lo, hi) = (bx.lower_vec(), bx.upper_vec());
    let oo = OptimizerOptions {
        tol: opts.tol,
        max_iter: opts.max_iter,
    };

    let mut best: Option<optimizer::Minimum> = None;
    let mut start_values = Vec::with_capacity(opts.starts);
    let mut iterations = 0;
    let mut evaluations = 0;
    let mut nelder_mead_used = false;
    for x0 in start_points(bx, opts.starts, opts.seed) {
        let m = minimize(&obj, &x0, &lo, &hi, &oo)?;
        iterations += m.iterations;
        evaluations += m.evaluations;
        nelder_mead_used |= m.used_nelder_mead;
        start_values.push(m.f);
        let better = match &best {
            None => true,
            Some(b) => m.f < b.f || (m.f == b.f && m.converged && !b.converged),
        };
        if better {
            best = Some(m);
        }
    }
    let mut best = best.expect("at least one start");
    if !best.converged {
        // one more pass from the best iterate before giving up
        let m = minimize(&obj, &best.x, &lo, &hi, &oo)?;
        iterations += m.iterations;
        evaluations += m.evaluations;
        if m.f <= best.f {
            best = m;
        }
    }
    if !best.converged {
        return Err(Error::NonConvergence {
            restarts: opts.starts,
            grad_norm: best.projected_grad_norm,
            best_theta: best.x.iter().copied().collect(),
        });
    }

    let theta_hat = Theta::from(&best.x);
    let eval = pl.evaluate(&theta_hat, true)?;
    let u2 = symmetrize(&(-eval.hess.expect("hessian requested") / area));
    let mut warnings = Vec::new();
    let width = &hi - &lo;
    let on_boundary = (0..bx.dim())
        .any(|k| best.x[k] - lo[k] <= 1e-9 * width[k] || hi[k] - best.x[k] <= 1e-9 * width[k]);
    if on_boundary {
        warnings.push(format!(
            "estimate {:?} lies on the boundary of the parameter box; the normal approximation assumes an interior parameter",
            theta_hat.as_slice()
        ));
    }
    let u2_condition = condition_number(&u2);

    let mut result = FitResult {
        theta_hat,
        log_pl_value: eval.value,
        u_n_value: -eval.value / area,
        grad_norm: best.projected_grad_norm,
        u2_matrix: u2,
        sigma_hat: None,
        sandwich_cov: None,
        ci: None,
        optimizer: OptimizerReport {
            iterations,
            converged: true,
            restarts: opts.starts,
            evaluations,
            nelder_mead_used,
            start_values,
        },
        on_boundary,
        u2_condition,
        psd_clipping: None,
        n_points: pl.n_points(),
        area,
        cells: partition.as_ref().map(|p| p.shape()),
        warnings,
    };

    if let Some(part) = &partition {
        if let Some(w) = partition_warning(part) {
            result.warnings.push(w);
        }
        let scores: Vec<DVector<f64>> = eval
            .breakdown
            .per_cell
            .iter()
            .map(|c| DVector::from_column_slice(&c.score))
            .collect();
        let sigma = sigma_hat_from_scores(part, &scores);
        let sw = sandwich_cov(&result.u2_matrix, &sigma, area)?;
        let (ci, ci_warnings) = confidence_intervals(&result.theta_hat, &sw.cov, opts.level)?;
        result.warnings.extend(ci_warnings);
        result.sigma_hat = Some(sigma);
        result.psd_clipping = Some(sw.psd_clipping);
        result.sandwich_cov = Some(sw.cov);
        result.ci = Some(ci);
    }
    Ok(result)
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Ratio of extreme absolute eigenvalues of a symmetric matrix.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let eig = m.clone().symmetric_eigenvalues();
    let max = eig.amax();
    let min = eig.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Warning for partitions too small for the neighbor sums to be meaningful.
pub fn partition_warning(partition: &CellPartition) -> Option<String> {
    let (nx, ny) = partition.shape();
    (nx < 3 || ny < 3).then(|| {
        format!(
            "cell partition is {nx}x{ny}, smaller than 3x3; the score covariance estimate is unreliable"
        )
    })
}

/// `Σ̂ = |Λ|⁻¹ Σᵢ Σ_{j: |i−j|∞ ≤ 1} sᵢ sⱼᵀ` from per-cell scores given in
/// partition order. Returned as `(M + Mᵀ)/2`, which is exactly symmetric.
pub fn sigma_hat_from_scores(partition: &CellPartition, scores: &[DVector<f64>]) -> DMatrix<f64> {
    assert_eq!(scores.len(), partition.len(), "one score per cell");
    let p = scores.first().map_or(0, |s| s.len());
    let mut m = DMatrix::zeros(p, p);
    for (i, si) in scores.iter().enumerate() {
        for j in partition.neighbors(i) {
            m += si * scores[j].transpose();
        }
    }
    symmetrize(&m) / partition.window().area()
}

/// Block estimate of the covariance of the normalized score at `theta`.
pub fn sigma_hat(
    cfg: &Configuration,
    spec: &ModelSpec,
    theta: &Theta,
    partition: &CellPartition,
    quad: &QuadratureScheme,
) -> Result<DMatrix<f64>> {
    let pl = PseudoLikelihood::new(cfg, spec, partition.window(), quad, Some(partition))?;
    let e = pl.evaluate(theta, false)?;
    let scores: Vec<DVector<f64>> = e
        .breakdown
        .per_cell
        .iter()
        .map(|c| DVector::from_column_slice(&c.score))
        .collect();
    Ok(sigma_hat_from_scores(partition, &scores))
}

/// Same as [`sigma_hat`] with the partition built from a cell side.
pub fn sigma_hat_with_side(
    cfg: &Configuration,
    spec: &ModelSpec,
    theta: &Theta,
    estimation_window: &Window,
    cell_side: f64,
    quad: &QuadratureScheme,
) -> Result<DMatrix<f64>> {
    let part = build_partition(estimation_window, cell_side)?;
    sigma_hat(cfg, spec, theta, &part, quad)
}

/// `|Λ|⁻¹ U²⁻¹ Σ̂₊ U²⁻¹` where `Σ̂₊` is `Σ̂` with negative eigenvalues set
/// to zero. `U²` is inverted through its eigendecomposition and rejected
/// when an eigenvalue falls below `EIGEN_CUTOFF` times the largest.
pub fn sandwich_cov(u2: &DMatrix<f64>, sigma: &DMatrix<f64>, area: f64) -> Result<Sandwich> {
    if u2.nrows() != sigma.nrows() || !u2.is_square() || !sigma.is_square() {
        return Err(Error::InvalidArgument(format!(
            "U2 is {}x{} but sigma is {}x{}",
            u2.nrows(),
            u2.ncols(),
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    if !(area > 0.0) {
        return Err(Error::InvalidArgument(format!("area must be positive, got {area}")));
    }
    if u2.iter().chain(sigma.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite entry in U2 or sigma".into()));
    }
    let eig = symmetrize(u2).symmetric_eigen();
    let top = eig.eigenvalues.amax();
    let condition = condition_number(u2);
    if top == 0.0 || eig.eigenvalues.iter().any(|l| l.abs() < EIGEN_CUTOFF * top) {
        return Err(Error::Singular {
            condition,
            context: "U2 is not invertible at the estimate".into(),
        });
    }
    let inv = &eig.eigenvectors
        * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l))
        * eig.eigenvectors.transpose();

    let se = symmetrize(sigma).symmetric_eigen();
    let clipping = se.eigenvalues.iter().fold(0.0_f64, |a, &l| a.max(-l));
    let sigma_plus = &se.eigenvectors
        * DMatrix::from_diagonal(&se.eigenvalues.map(|l| l.max(0.0)))
        * se.eigenvectors.transpose();

    let cov = symmetrize(&(&inv * sigma_plus * &inv / area));
    Ok(Sandwich {
        cov,
        u2_condition: condition,
        psd_clipping: clipping,
    })
}

/// `θ̂_k ± z_{(1+level)/2} √cov_kk`, with a warning for every zero-width
/// interval.
pub fn confidence_intervals(
    theta_hat: &Theta,
    cov: &DMatrix<f64>,
    level: f64,
) -> Result<(ConfidenceIntervals, Vec<String>)> {
    check_level(level)?;
    if cov.nrows() != theta_hat.len() || !cov.is_square() {
        return Err(Error::InvalidArgument(format!(
            "covariance is {}x{} for {} parameters",
            cov.nrows(),
            cov.ncols(),
            theta_hat.len()
        )));
    }
    let z = Normal::standard().inverse_cdf(0.5 * (1.0 + level));
    let mut warnings = Vec::new();
    let intervals = (0..theta_hat.len())
        .map(|k| {
            let var = cov[(k, k)].max(0.0);
            if var == 0.0 {
                warnings.push(format!(
                    "zero variance for theta{}: the interval is degenerate",
                    k + 1
                ));
            }
            let h = z * var.sqrt();
            [theta_hat[k] - h, theta_hat[k] + h]
        })
        .collect();
    Ok((ConfidenceIntervals { level, intervals }, warnings))
}
