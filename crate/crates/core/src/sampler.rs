//! Birth-death-move Metropolis-Hastings sampler for a pairwise Gibbs model on
//! a bounded window with empty outside configuration, and the GNZ
//! equilibrium residual used to check it.
//!
//! The target density with respect to the unit-rate Poisson process on `W` is
//! proportional to `e^{−V_W(φ)}`, so for a point `u`
//!
//! ```text
//! birth  u        : min(1, |W|/(n+1) · e^{−V(u|φ)})
//! death  x        : min(1, n/|W| · e^{+V(x|φ∖x)})
//! move   x → x'   : min(1, e^{−(V(x'|φ∖x) − V(x|φ∖x))})
//! ```
//!
//! with equal birth and death proposal probabilities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Configuration, Point, SpatialGrid, Window, DUPLICATE_TOLERANCE};
use crate::models::{pair_sums, ModelSpec, PairSums, Theta};
use crate::pseudolik::{check_observation_regime, QuadratureScheme, UNDERFLOW_ENERGY};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_steps: u64,
    pub burn_in: u64,
    pub p_birth: f64,
    pub p_death: f64,
    pub p_move: f64,
    pub move_sigma: f64,
    pub seed: u64,
    /// ChaCha stream; replicate chains share a seed and differ by stream.
    #[serde(default)]
    pub stream: u64,
    #[serde(default = "default_trace_every")]
    pub trace_every: u64,
}

fn default_trace_every() -> u64 {
    100
}

impl SamplerConfig {
    /// Proposal mix 0.4/0.4/0.2, move scale a quarter of the interaction range,
    /// burn-in of ten times the expected Poisson count `|W|e^{−θ₁}` and fifty
    /// times that for the recorded run.
    pub fn default_for(spec: &ModelSpec, theta: &Theta, window: &Window, seed: u64) -> Self {
        let expected = window.area() * (-theta.theta1()).exp();
        let range = spec.interaction_range();
        let move_sigma = if range > 0.0 && range.is_finite() {
            range / 4.0
        } else {
            0.25
        };
        SamplerConfig {
            n_steps: ((50.0 * expected).ceil() as u64).max(10_000),
            burn_in: ((10.0 * expected).ceil() as u64).max(1_000),
            p_birth: 0.4,
            p_death: 0.4,
            p_move: 0.2,
            move_sigma,
            seed,
            stream: 0,
            trace_every: default_trace_every(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [self.p_birth, self.p_death, self.p_move];
        if probs.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
            return Err(Error::InvalidArgument(format!(
                "proposal probabilities must lie in (0, 1), got {probs:?}"
            )));
        }
        if ((probs.iter().sum::<f64>()) - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "proposal probabilities must sum to 1, got {probs:?}"
            )));
        }
        if (self.p_birth - self.p_death).abs() > 1e-12 {
            return Err(Error::InvalidArgument(
                "birth and death proposal probabilities must be equal".into(),
            ));
        }
        if !(self.move_sigma > 0.0) || !self.move_sigma.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "move_sigma must be positive, got {}",
                self.move_sigma
            )));
        }
        if self.n_steps == 0 || self.burn_in == 0 {
            return Err(Error::InvalidArgument("n_steps and burn_in must be positive".into()));
        }
        if self.trace_every == 0 {
            return Err(Error::InvalidArgument("trace_every must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct MoveStats {
    pub proposed: u64,
    pub accepted: u64,
}

impl MoveStats {
    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TracePoint {
    pub step: u64,
    pub energy: f64,
    pub n_points: usize,
}

/// Chain diagnostics. Move counts cover the post-burn-in steps; the trace
/// covers the whole run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainStats {
    pub birth: MoveStats,
    pub death: MoveStats,
    #[serde(rename = "move")]
    pub shift: MoveStats,
    pub acceptance_rates: AcceptanceRates,
    pub trace: Vec<TracePoint>,
    pub final_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AcceptanceRates {
    pub birth: f64,
    pub death: f64,
    #[serde(rename = "move")]
    pub shift: f64,
}

/// Mutable pattern with its bucket grid.
struct State<'a> {
    spec: &'a ModelSpec,
    theta: &'a [f64],
    points: Vec<Point>,
    grid: SpatialGrid,
}

impl State<'_> {
    /// `V(u | φ ∖ {exclude})`, `+∞` when `u` coincides with a point.
    fn energy(&self, u: &Point, exclude: Option<usize>) -> f64 {
        match pair_sums(self.spec, u, &self.grid, exclude) {
            Ok(sums) => self.spec.energy_terms(self.theta, &sums).value,
            Err(_) => f64::INFINITY,
        }
    }

    fn remove(&mut self, k: usize) {
        let last = self.points.len() - 1;
        let xk = self.points[k];
        self.grid.remove(k, &xk);
        if k != last {
            let xl = self.points[last];
            self.grid.relabel(last, k, &xl);
        }
        self.points.swap_remove(k);
    }
}

/// Runs `cfg.burn_in + cfg.n_steps` steps from the empty pattern and returns
/// the final state.
pub fn simulate(
    spec: &ModelSpec,
    theta: &Theta,
    window: &Window,
    cfg: &SamplerConfig,
) -> Result<(Configuration, ChainStats)> {
    spec.validate()?;
    spec.check_theta(theta)?;
    cfg.validate()?;
    let area = window.area();
    if !(area > 0.0) {
        return Err(Error::InvalidArgument("simulation window has zero area".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(cfg.stream);

    let range = spec.interaction_range();
    let cell = if range > 0.0 { range } else { 1.0 };
    let mut st = State {
        spec,
        theta: theta.as_slice(),
        points: Vec::new(),
        grid: SpatialGrid::new(window, cell)?,
    };
    let ln_area = area.ln();
    let mut energy = 0.0;
    let mut counts = [MoveStats::default(); 3];
    let mut trace = Vec::new();
    let total = cfg.burn_in + cfg.n_steps;

    for step in 0..total {
        let recording = step >= cfg.burn_in;
        let kind = {
            let u: f64 = rng.random();
            if u < cfg.p_birth {
                0
            } else if u < cfg.p_birth + cfg.p_death {
                1
            } else {
                2
            }
        };
        let n = st.points.len();
        let accepted = match kind {
            0 => {
                let u = Point::new(
                    window.x_min() + rng.random::<f64>() * window.width(),
                    window.y_min() + rng.random::<f64>() * window.height(),
                );
                let v = st.energy(&u, None);
                let log_ratio = ln_area - ((n + 1) as f64).ln() - v;
                let ok = v.is_finite() && accept(&mut rng, log_ratio);
                if ok {
                    st.grid.insert(n, u);
                    st.points.push(u);
                    energy += v;
                }
                ok
            }
            1 => {
                if n == 0 {
                    false
                } else {
                    let k = rng.random_range(0..n);
                    let v = st.energy(&st.points[k], Some(k));
                    let log_ratio = (n as f64).ln() - ln_area + v;
                    let ok = accept(&mut rng, log_ratio);
                    if ok {
                        st.remove(k);
                        energy -= v;
                    }
                    ok
                }
            }
            _ => {
                if n == 0 {
                    false
                } else {
                    let k = rng.random_range(0..n);
                    let old = st.points[k];
                    let dx: f64 = rng.sample(StandardNormal);
                    let dy: f64 = rng.sample(StandardNormal);
                    let new = Point::new(old.x + cfg.move_sigma * dx, old.y + cfg.move_sigma * dy);
                    if !window.contains(&new) {
                        false
                    } else {
                        let v_old = st.energy(&old, Some(k));
                        let v_new = st.energy(&new, Some(k));
                        let ok = v_new.is_finite() && accept(&mut rng, v_old - v_new);
                        if ok {
                            st.grid.remove(k, &old);
                            st.grid.insert(k, new);
                            st.points[k] = new;
                            energy += v_new - v_old;
                        }
                        ok
                    }
                }
            }
        };
        if recording {
            counts[kind].proposed += 1;
            counts[kind].accepted += accepted as u64;
        }
        if (step + 1) % cfg.trace_every == 0 {
            trace.push(TracePoint {
                step: step + 1,
                energy,
                n_points: st.points.len(),
            });
        }
    }

    let final_count = st.points.len();
    let stats = ChainStats {
        birth: counts[0],
        death: counts[1],
        shift: counts[2],
        acceptance_rates: AcceptanceRates {
            birth: counts[0].rate(),
            death: counts[1].rate(),
            shift: counts[2].rate(),
        },
        trace,
        final_count,
    };
    Ok((Configuration::from_parts_unchecked(st.points, *window), stats))
}

#[inline]
fn accept(rng: &mut ChaCha8Rng, log_ratio: f64) -> bool {
    if log_ratio >= 0.0 {
        // still draw so the stream position does not depend on the branch
        let _: f64 = rng.random();
        true
    } else {
        rng.random::<f64>() < log_ratio.exp()
    }
}

/// Test functions `h(x, φ)` for the GNZ residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestFunction {
    /// `h ≡ 1`
    Constant,
    /// `h(x, φ) = V(x | φ; θ)`
    LocalEnergy,
    /// number of points of `φ` within the interaction range of `x`
    NeighborCount,
}

impl TestFunction {
    pub const ALL: [TestFunction; 3] = [
        TestFunction::Constant,
        TestFunction::LocalEnergy,
        TestFunction::NeighborCount,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TestFunction::Constant => "constant",
            TestFunction::LocalEnergy => "local_energy",
            TestFunction::NeighborCount => "neighbor_count",
        }
    }

    #[inline]
    fn eval(&self, energy: f64, sums: &PairSums) -> f64 {
        match self {
            TestFunction::Constant => 1.0,
            TestFunction::LocalEnergy => energy,
            TestFunction::NeighborCount => sums.count as f64,
        }
    }
}

/// `(1/|Λ|)·[Σ_{x∈φ_Λ} h(x, φ∖x) − ∫_Λ h(u, φ) e^{−V(u|φ)} du]`, whose
/// expectation vanishes when `cfg` is drawn from the model at `theta`.
pub fn gnz_residual(
    cfg: &Configuration,
    spec: &ModelSpec,
    theta: &Theta,
    test_fn: TestFunction,
    estimation_window: &Window,
    quad: &QuadratureScheme,
) -> Result<f64> {
    let all = gnz_residuals(cfg, spec, theta, estimation_window, quad)?;
    let k = TestFunction::ALL.iter().position(|t| *t == test_fn).unwrap();
    Ok(all[k])
}

/// [`gnz_residual`] for every function of [`TestFunction::ALL`], in that
/// order, sharing one pass over the pattern.
pub fn gnz_residuals(
    cfg: &Configuration,
    spec: &ModelSpec,
    theta: &Theta,
    estimation_window: &Window,
    quad: &QuadratureScheme,
) -> Result<[f64; 3]> {
    spec.validate()?;
    spec.check_theta(theta)?;
    check_observation_regime(cfg, spec, estimation_window)?;
    if !quad.window().contains_window(estimation_window, 1e-9)
        || !estimation_window.contains_window(quad.window(), 1e-9)
    {
        return Err(Error::InvalidArgument(format!(
            "quadrature window {} differs from the estimation window {}",
            quad.window(),
            estimation_window
        )));
    }
    let th = theta.as_slice();
    let range = spec.interaction_range();
    let grid = SpatialGrid::build(cfg, if range > 0.0 { range } else { 1.0 })?;
    let tol2 = DUPLICATE_TOLERANCE * DUPLICATE_TOLERANCE;
    let range2 = range * range;

    let mut integral = [0.0; 3];
    for (u, w) in quad.points().iter().zip(quad.weights()) {
        let mut sums = PairSums::default();
        grid.for_each_within(u, range, |_, _, d2| {
            if d2 <= range2 {
                sums.add_pair(d2.max(tol2));
            }
        });
        let v = spec.energy_terms(th, &sums).value;
        if v > UNDERFLOW_ENERGY {
            continue;
        }
        let weight = w * (-v).exp();
        for (acc, t) in integral.iter_mut().zip(TestFunction::ALL) {
            *acc += weight * t.eval(v, &sums);
        }
    }
    let mut point_sum = [0.0; 3];
    for (i, x) in cfg.points().iter().enumerate() {
        if !estimation_window.contains(x) {
            continue;
        }
        let sums = pair_sums(spec, x, &grid, Some(i))?;
        let v = spec.energy_terms(th, &sums).value;
        for (acc, t) in point_sum.iter_mut().zip(TestFunction::ALL) {
            *acc += t.eval(v, &sums);
        }
    }
    let area = estimation_window.area();
    Ok([
        (point_sum[0] - integral[0]) / area,
        (point_sum[1] - integral[1]) / area,
        (point_sum[2] - integral[2]) / area,
    ])
}
