//! Pairwise interaction families: local energies and their parameter
//! derivatives, plus the tail bound for infinite-range Lennard-Jones.
//!
//! Every supported family has a local energy of the form
//!
//! ```text
//! V(x | φ; θ) = θ₁ + Σ_{y ∈ φ, ‖x−y‖ ≤ range} g(‖x − y‖; θ)
//! ```
//!
//! and for all of them the sum only enters through three neighbor sums
//! (count, Σ r⁻⁶, Σ r⁻¹²), collected in [`PairSums`]. Fitting code computes
//! these once per location and re-evaluates energies cheaply for each θ.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Configuration, Point, SpatialGrid, DUPLICATE_TOLERANCE};

/// Parameter vector. Length is the model dimension `p` (1, 2 or 3).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Theta(Vec<f64>);

impl Theta {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.len() > 3 {
            return Err(Error::InvalidArgument(format!(
                "theta must have 1 to 3 entries, got {}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("theta entry {v} is not finite")));
        }
        Ok(Theta(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Chemical potential.
    pub fn theta1(&self) -> f64 {
        self.0[0]
    }

    /// Interaction strength (Strauss) or well depth (LJ).
    pub fn theta2(&self) -> Option<f64> {
        self.0.get(1).copied()
    }

    /// LJ zero-crossing distance.
    pub fn theta3(&self) -> Option<f64> {
        self.0.get(2).copied()
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.0)
    }
}

impl From<&DVector<f64>> for Theta {
    fn from(v: &DVector<f64>) -> Self {
        Theta(v.iter().copied().collect())
    }
}

impl std::ops::Index<usize> for Theta {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Compact box constraint for θ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterBox {
    pub lower: Theta,
    pub upper: Theta,
}

impl ParameterBox {
    pub fn new(lower: Theta, upper: Theta) -> Result<Self> {
        let b = ParameterBox { lower, upper };
        b.check_shape()?;
        Ok(b)
    }

    fn check_shape(&self) -> Result<()> {
        if self.lower.len() != self.upper.len() {
            return Err(Error::InvalidArgument(format!(
                "box bounds have lengths {} and {}",
                self.lower.len(),
                self.upper.len()
            )));
        }
        for (k, (lo, hi)) in self.lower.0.iter().zip(&self.upper.0).enumerate() {
            if !(lo < hi) {
                return Err(Error::InvalidArgument(format!(
                    "box lower bound {lo} is not below upper bound {hi} for theta{}",
                    k + 1
                )));
            }
        }
        Ok(())
    }

    /// Checks the box against a model: dimension match and, for LJ, strictly
    /// positive lower bounds on θ₂ and θ₃.
    pub fn validate_for(&self, spec: &ModelSpec) -> Result<()> {
        self.check_shape()?;
        if self.dim() != spec.dim() {
            return Err(Error::InvalidArgument(format!(
                "box has dimension {} but the {} model has {} parameters",
                self.dim(),
                spec.family_name(),
                spec.dim()
            )));
        }
        if matches!(spec, ModelSpec::LennardJones { .. })
            && (self.lower.0[1] <= 0.0 || self.lower.0[2] <= 0.0)
        {
            return Err(Error::InvalidArgument(
                "Lennard-Jones boxes need strictly positive lower bounds on theta2 and theta3".into(),
            ));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn center(&self) -> Theta {
        Theta(
            self.lower
                .0
                .iter()
                .zip(&self.upper.0)
                .map(|(l, u)| 0.5 * (l + u))
                .collect(),
        )
    }

    pub fn contains(&self, theta: &Theta) -> bool {
        theta.len() == self.dim()
            && theta
                .0
                .iter()
                .zip(self.lower.0.iter().zip(&self.upper.0))
                .all(|(t, (l, u))| t >= l && t <= u)
    }

    /// Clamps each coordinate into the box.
    pub fn project(&self, v: &mut DVector<f64>) {
        for (k, x) in v.iter_mut().enumerate() {
            *x = x.clamp(self.lower.0[k], self.upper.0[k]);
        }
    }

    pub fn lower_vec(&self) -> DVector<f64> {
        self.lower.to_dvector()
    }

    pub fn upper_vec(&self) -> DVector<f64> {
        self.upper.to_dvector()
    }
}

/// Interaction family with its structural constants.
///
/// JSON form: `{"family":"poisson"}`, `{"family":"strauss","R":0.1}`,
/// `{"family":"lennard_jones","D":0.5}` or
/// `{"family":"lennard_jones","D":"inf","truncation_radius":3.0}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Poisson,
    Strauss {
        #[serde(rename = "R")]
        r: f64,
    },
    LennardJones {
        #[serde(rename = "D", with = "range_serde")]
        d: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        truncation_radius: Option<f64>,
    },
}

mod range_serde {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if matches!(s.as_str(), "inf" | "infinity" | "+inf") => Ok(f64::INFINITY),
            Repr::Str(s) => Err(de::Error::custom(format!(
                "expected a number or \"inf\", got {s:?}"
            ))),
        }
    }
}

impl ModelSpec {
    pub fn poisson() -> Self {
        ModelSpec::Poisson
    }

    pub fn strauss(r: f64) -> Result<Self> {
        let s = ModelSpec::Strauss { r };
        s.validate()?;
        Ok(s)
    }

    /// Finite-range LJ with cut-off `d`.
    pub fn lennard_jones(d: f64) -> Result<Self> {
        let s = ModelSpec::LennardJones {
            d,
            truncation_radius: None,
        };
        s.validate()?;
        Ok(s)
    }

    /// Infinite-range LJ evaluated with sums truncated at `truncation_radius`.
    pub fn lennard_jones_infinite(truncation_radius: f64) -> Result<Self> {
        let s = ModelSpec::LennardJones {
            d: f64::INFINITY,
            truncation_radius: Some(truncation_radius),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ModelSpec::Poisson => Ok(()),
            ModelSpec::Strauss { r } => {
                if r > 0.0 && r.is_finite() {
                    Ok(())
                } else {
                    Err(Error::InvalidArgument(format!("Strauss radius must be positive, got {r}")))
                }
            }
            ModelSpec::LennardJones {
                d,
                truncation_radius,
            } => {
                if !(d > 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "Lennard-Jones range D must be positive or inf, got {d}"
                    )));
                }
                if d.is_infinite() {
                    match truncation_radius {
                        Some(t) if t > 0.0 && t.is_finite() => Ok(()),
                        Some(t) => Err(Error::InvalidArgument(format!(
                            "truncation radius must be positive, got {t}"
                        ))),
                        None => Err(Error::InvalidArgument(
                            "infinite-range Lennard-Jones needs a truncation_radius".into(),
                        )),
                    }
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Parameter dimension `p`.
    pub fn dim(&self) -> usize {
        match self {
            ModelSpec::Poisson => 1,
            ModelSpec::Strauss { .. } => 2,
            ModelSpec::LennardJones { .. } => 3,
        }
    }

    pub fn family_name(&self) -> &'static str {
        match self {
            ModelSpec::Poisson => "poisson",
            ModelSpec::Strauss { .. } => "strauss",
            ModelSpec::LennardJones { .. } => "lennard_jones",
        }
    }

    /// True for models satisfying the locality property (Poisson, Strauss,
    /// finite-range LJ).
    pub fn is_finite_range(&self) -> bool {
        match self {
            ModelSpec::LennardJones { d, .. } => d.is_finite(),
            _ => true,
        }
    }

    /// Distance beyond which pairs do not interact in evaluations. For
    /// infinite-range LJ this is the truncation radius.
    pub fn interaction_range(&self) -> f64 {
        match *self {
            ModelSpec::Poisson => 0.0,
            ModelSpec::Strauss { r } => r,
            ModelSpec::LennardJones {
                d,
                truncation_radius,
            } => {
                if d.is_finite() {
                    d
                } else {
                    truncation_radius.unwrap_or(f64::INFINITY)
                }
            }
        }
    }

    pub fn check_theta(&self, theta: &Theta) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(Error::InvalidArgument(format!(
                "the {} model has {} parameters, theta has {}",
                self.family_name(),
                self.dim(),
                theta.len()
            )));
        }
        Ok(())
    }

    /// Local energy with its gradient and Hessian in θ, given the neighbor
    /// sums. Entries beyond `dim()` are zero.
    #[inline]
    pub fn energy_terms(&self, theta: &[f64], sums: &PairSums) -> EnergyTerms {
        let mut out = EnergyTerms {
            value: theta[0],
            grad: [1.0, 0.0, 0.0],
            hess: [[0.0; 3]; 3],
        };
        match self {
            ModelSpec::Poisson => {}
            ModelSpec::Strauss { .. } => {
                let k = sums.count as f64;
                out.value += theta[1] * k;
                out.grad[1] = k;
            }
            ModelSpec::LennardJones { .. } => {
                if sums.count == 0 {
                    return out;
                }
                let (t2, t3) = (theta[1], theta[2]);
                let t2p = t3 * t3;
                let t4 = t2p * t2p;
                let t5 = t4 * t3;
                let t6 = t4 * t2p;
                let t10 = t6 * t4;
                let t11 = t10 * t3;
                let t12 = t6 * t6;
                let shape = 4.0 * (t12 * sums.inv12 - t6 * sums.inv6);
                let d3 = 4.0 * (12.0 * t11 * sums.inv12 - 6.0 * t5 * sums.inv6);
                let d33 = 4.0 * (132.0 * t10 * sums.inv12 - 30.0 * t4 * sums.inv6);
                out.value += t2 * shape;
                out.grad[1] = shape;
                out.grad[2] = t2 * d3;
                out.hess[1][2] = d3;
                out.hess[2][1] = d3;
                out.hess[2][2] = t2 * d33;
            }
        }
        out
    }
}

/// Local energy and its first two θ-derivatives at one location.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyTerms {
    pub value: f64,
    pub grad: [f64; 3],
    pub hess: [[f64; 3]; 3],
}

/// Neighbor sums within the interaction range.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PairSums {
    pub count: u32,
    /// Σ r⁻⁶
    pub inv6: f64,
    /// Σ r⁻¹²
    pub inv12: f64,
}

impl PairSums {
    #[inline]
    pub fn add_pair(&mut self, d2: f64) {
        let inv2 = 1.0 / d2;
        let inv6 = inv2 * inv2 * inv2;
        self.count += 1;
        self.inv6 += inv6;
        self.inv12 += inv6 * inv6;
    }
}

/// Collects the neighbor sums at `x` over `points` stored in `grid`, skipping
/// the entry `exclude`. Fails if another point coincides with `x`.
pub fn pair_sums(
    spec: &ModelSpec,
    x: &Point,
    grid: &SpatialGrid,
    exclude: Option<usize>,
) -> Result<PairSums> {
    let range = spec.interaction_range();
    let tol2 = DUPLICATE_TOLERANCE * DUPLICATE_TOLERANCE;
    let range2 = range * range;
    let mut sums = PairSums::default();
    let mut clash = None;
    grid.for_each_within(x, range.max(DUPLICATE_TOLERANCE), |i, _, d2| {
        if Some(i) == exclude {
            return;
        }
        if d2 < tol2 {
            clash = Some(i);
        } else if d2 <= range2 {
            sums.add_pair(d2);
        }
    });
    match clash {
        Some(i) => Err(Error::InvalidArgument(format!(
            "location ({}, {}) coincides with configuration point {i}",
            x.x, x.y
        ))),
        None => Ok(sums),
    }
}

/// Pair potential `g(r; θ)`.
pub fn pair_potential(spec: &ModelSpec, theta: &Theta, r: f64) -> Result<f64> {
    spec.check_theta(theta)?;
    if !(r > 0.0) {
        return Err(Error::InvalidArgument(format!("pair distance must be positive, got {r}")));
    }
    Ok(match spec {
        ModelSpec::Poisson => 0.0,
        ModelSpec::Strauss { r: range } => {
            if r <= *range {
                theta[1]
            } else {
                0.0
            }
        }
        ModelSpec::LennardJones { .. } => {
            if r > spec.interaction_range() {
                0.0
            } else {
                lj_raw(theta[1], theta[2], r)
            }
        }
    })
}

/// `4ε((σ/r)¹² − (σ/r)⁶)` without cut-off.
#[inline]
fn lj_raw(eps: f64, sigma: f64, r: f64) -> f64 {
    let s = sigma / r;
    let s2 = s * s;
    let s6 = s2 * s2 * s2;
    4.0 * eps * (s6 * s6 - s6)
}

fn terms_at(
    spec: &ModelSpec,
    theta: &Theta,
    x: &Point,
    cfg: &Configuration,
    grid: &SpatialGrid,
) -> Result<EnergyTerms> {
    spec.check_theta(theta)?;
    debug_assert_eq!(grid.len(), cfg.len());
    let sums = pair_sums(spec, x, grid, None)?;
    Ok(spec.energy_terms(theta.as_slice(), &sums))
}

/// `V(x | φ; θ)`; `x` must not be a point of `cfg`.
pub fn local_energy(
    spec: &ModelSpec,
    theta: &Theta,
    x: &Point,
    cfg: &Configuration,
    grid: &SpatialGrid,
) -> Result<f64> {
    Ok(terms_at(spec, theta, x, cfg, grid)?.value)
}

/// `V(x | φ ∖ x; θ)` for the configuration point with index `index`.
pub fn local_energy_of_point(
    spec: &ModelSpec,
    theta: &Theta,
    index: usize,
    cfg: &Configuration,
    grid: &SpatialGrid,
) -> Result<f64> {
    spec.check_theta(theta)?;
    let x = cfg.points()[index];
    let sums = pair_sums(spec, &x, grid, Some(index))?;
    Ok(spec.energy_terms(theta.as_slice(), &sums).value)
}

/// `∇_θ V(x | φ; θ)`, length `p`.
pub fn grad_local_energy(
    spec: &ModelSpec,
    theta: &Theta,
    x: &Point,
    cfg: &Configuration,
    grid: &SpatialGrid,
) -> Result<DVector<f64>> {
    let t = terms_at(spec, theta, x, cfg, grid)?;
    Ok(DVector::from_column_slice(&t.grad[..spec.dim()]))
}

/// `∇²_θ V(x | φ; θ)`, `p × p` and symmetric.
pub fn hess_local_energy(
    spec: &ModelSpec,
    theta: &Theta,
    x: &Point,
    cfg: &Configuration,
    grid: &SpatialGrid,
) -> Result<DMatrix<f64>> {
    let t = terms_at(spec, theta, x, cfg, grid)?;
    let p = spec.dim();
    Ok(DMatrix::from_fn(p, p, |i, j| t.hess[i][j]))
}

/// Upper bound on `|Σ_{‖y−x‖ > R} g(‖y−x‖; θ)|` for any configuration with at
/// most `m` points per unit area in every unit annulus around `x`.
///
/// With `C_n = {n−1 < r ≤ n}` and `|C_n| = π(2n−1)`, the bound is
/// `k·m·Σ_{n≥⌈R⌉} |C_n| n⁻⁶`, where `k` bounds `n⁶·sup_{r∈C_n, r>R}|g(r)|`.
/// The series remainder is over-estimated analytically so the result stays a
/// bound.
pub fn tail_bound(spec: &ModelSpec, theta: &Theta, r: f64, m: f64) -> Result<f64> {
    spec.check_theta(theta)?;
    if !matches!(spec, ModelSpec::LennardJones { .. }) {
        return Err(Error::InvalidArgument(
            "tail bounds are defined for the Lennard-Jones family only".into(),
        ));
    }
    tail_bound_magnitude(theta[1].abs(), theta[2].abs(), r, m)
}

/// [`tail_bound`] maximized over a parameter box (the bound increases with
/// |θ₂| and |θ₃|).
pub fn tail_bound_box(spec: &ModelSpec, bx: &ParameterBox, r: f64, m: f64) -> Result<f64> {
    bx.validate_for(spec)?;
    let eps = bx.lower[1].abs().max(bx.upper[1].abs());
    let sigma = bx.lower[2].abs().max(bx.upper[2].abs());
    tail_bound_magnitude(eps, sigma, r, m)
}

fn tail_bound_magnitude(eps: f64, sigma: f64, r: f64, m: f64) -> Result<f64> {
    if !(r >= 1.0) || !r.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "tail bound needs a finite radius R >= 1, got {r}"
        )));
    }
    if !(m > 0.0) || !m.is_finite() {
        return Err(Error::InvalidArgument(format!("density m must be positive, got {m}")));
    }
    let first = r.ceil() as u64;
    // Beyond n_flat the annulus bound n⁶·4ε(σ/(n−1))⁶ decreases in n.
    let n_flat = first.max(sigma.ceil() as u64 + 2);
    let mut k: f64 = 0.0;
    for n in first..=n_flat {
        let r_lo = ((n - 1) as f64).max(r);
        let a = sigma / r_lo;
        let a6 = a.powi(6);
        let sup_g = 4.0 * eps * a6.max(a6 * a6);
        k = k.max((n as f64).powi(6) * sup_g);
    }
    const TERMS: u64 = 20_000;
    let last = first + TERMS;
    let mut series = 0.0;
    for n in first..last {
        let nf = n as f64;
        series += PI * (2.0 * nf - 1.0) / nf.powi(6);
    }
    // Σ_{n≥N} π(2n−1)n⁻⁶ ≤ 2π Σ_{n≥N} n⁻⁵ ≤ 2π ∫_{N−1}^∞ x⁻⁵ dx
    let tail_from = (last - 1) as f64;
    series += PI / (2.0 * tail_from.powi(4));
    Ok(k * m * series)
}

/// Largest point density over the unit annuli `C_n` around `x` with
/// `n ≥ ⌈from_radius⌉`; the smallest `m` for which [`tail_bound`] applies to
/// the points beyond `from_radius`.
pub fn annulus_density(points: &[Point], x: &Point, from_radius: f64) -> f64 {
    let first = from_radius.ceil().max(1.0) as usize;
    let mut counts: Vec<usize> = Vec::new();
    for p in points {
        let r = p.dist(x);
        if r <= 0.0 {
            continue;
        }
        let n = r.ceil().max(1.0) as usize;
        if n < first {
            continue;
        }
        if counts.len() <= n {
            counts.resize(n + 1, 0);
        }
        counts[n] += 1;
    }
    counts
        .iter()
        .enumerate()
        .skip(first)
        .map(|(n, &c)| c as f64 / (PI * (2.0 * n as f64 - 1.0)))
        .fold(0.0, f64::max)
}

/// Smallest truncation radius (on a 1/8 grid, at least 1) whose tail bound
/// over `bx` at density `density` falls below `1e−6·max(|θ₁ scale|, 1)`.
pub fn default_truncation_radius(
    spec: &ModelSpec,
    bx: &ParameterBox,
    density: f64,
    theta1_scale: f64,
) -> Result<f64> {
    let target = 1e-6 * theta1_scale.abs().max(1.0);
    let probe = ModelSpec::LennardJones {
        d: f64::INFINITY,
        truncation_radius: Some(1.0),
    };
    if !matches!(spec, ModelSpec::LennardJones { .. }) {
        return Err(Error::InvalidArgument(
            "truncation radii apply to the Lennard-Jones family only".into(),
        ));
    }
    let density = density.max(f64::MIN_POSITIVE);
    let mut r = 1.0;
    while r < 1e6 {
        if tail_bound_box(&probe, bx, r, density)? < target {
            return Ok(r);
        }
        r += 0.125;
    }
    Err(Error::Numerical(
        "no truncation radius below 1e6 meets the tail tolerance".into(),
    ))
}
