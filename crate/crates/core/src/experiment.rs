//! Monte-Carlo experiments: simulate replicates at a known θ on nested
//! windows, fit each, and summarize estimation error and interval coverage.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dilate, Window};
use crate::inference::{default_cell_side, fit_mple, FitOptions};
use crate::models::{ModelSpec, ParameterBox, Theta};
use crate::pseudolik::{default_resolution, QuadratureScheme};
use crate::sampler::{simulate, SamplerConfig};

/// Share of failed replicates above which a window size is flagged.
pub const FAILURE_CAP: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerOverrides {
    pub n_steps: Option<u64>,
    pub burn_in: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub model: ModelSpec,
    /// Data-generating parameter.
    pub theta: Theta,
    #[serde(rename = "box")]
    pub parameter_box: ParameterBox,
    /// Estimation windows are `[0, s]²`.
    pub window_sides: Vec<f64>,
    pub replicates: usize,
    #[serde(default = "default_level")]
    pub level: f64,
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub sampler: Option<SamplerOverrides>,
    #[serde(default)]
    pub quad_resolution: Option<f64>,
    #[serde(default)]
    pub cell_side: Option<f64>,
    #[serde(default)]
    pub starts: Option<usize>,
}

fn default_level() -> f64 {
    0.95
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.model.check_theta(&self.theta)?;
        self.parameter_box.validate_for(&self.model)?;
        if !self.parameter_box.contains(&self.theta) {
            return Err(Error::InvalidArgument(format!(
                "theta {:?} lies outside the parameter box",
                self.theta.as_slice()
            )));
        }
        if self.replicates == 0 {
            return Err(Error::InvalidArgument("replicates must be at least 1".into()));
        }
        if self.window_sides.is_empty() {
            return Err(Error::InvalidArgument("window_sides is empty".into()));
        }
        for s in &self.window_sides {
            if !(*s > 0.0) || !s.is_finite() {
                return Err(Error::InvalidArgument(format!("window side must be positive, got {s}")));
            }
        }
        if self.window_sides.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(
                "window_sides must be strictly increasing".into(),
            ));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "level must lie in (0, 1), got {}",
                self.level
            )));
        }
        if let Some(r) = self.quad_resolution {
            if !(r > 0.0) || !r.is_finite() {
                return Err(Error::InvalidArgument(format!("quad_resolution must be positive, got {r}")));
            }
        }
        if self.starts == Some(0) {
            return Err(Error::InvalidArgument("starts must be at least 1".into()));
        }
        let side = self.cell_side();
        if !(side > 0.0) || side < self.model.interaction_range() {
            return Err(Error::InvalidArgument(format!(
                "cell side {side} must be at least the interaction range {}",
                self.model.interaction_range()
            )));
        }
        Ok(())
    }

    pub fn cell_side(&self) -> f64 {
        self.cell_side.unwrap_or_else(|| default_cell_side(&self.model))
    }

    /// Intervals are only computed for finite-range models.
    pub fn computes_intervals(&self) -> bool {
        self.model.is_finite_range()
    }

    /// Sampler settings for one replicate chain.
    pub fn sampler_config(&self, observation: &Window, stream: u64) -> SamplerConfig {
        let mut sc = SamplerConfig::default_for(&self.model, &self.theta, observation, self.seed);
        if let Some(o) = &self.sampler {
            if let Some(n) = o.n_steps {
                sc.n_steps = n;
            }
            if let Some(b) = o.burn_in {
                sc.burn_in = b;
            }
        }
        sc.stream = stream;
        sc
    }

    /// Estimation and observation windows for a side.
    pub fn windows(&self, side: f64) -> Result<(Window, Window)> {
        let est = Window::square(side)?;
        let obs = dilate(&est, self.cell_side())?;
        Ok((est, obs))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateRecord {
    pub side: f64,
    pub replicate: usize,
    pub n_points: usize,
    pub theta_hat: Option<Vec<f64>>,
    pub std_error: Option<Vec<f64>>,
    pub intervals: Option<Vec<[f64; 2]>>,
    pub on_boundary: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParameterSummary {
    pub mean: f64,
    pub rmse: f64,
    pub median_abs_error: f64,
    /// `None` for single-replicate plans and models without intervals.
    pub coverage: Option<f64>,
    pub mean_half_width: Option<f64>,
    pub studentized_skewness: Option<f64>,
    pub studentized_excess_kurtosis: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SideSummary {
    pub side: f64,
    pub area: f64,
    pub replicates: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub on_boundary: usize,
    pub failure_rate: f64,
    pub exceeds_failure_cap: bool,
    pub parameters: Vec<ParameterSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub plan: ExperimentPlan,
    pub sides: Vec<SideSummary>,
    #[serde(skip)]
    pub records: Vec<ReplicateRecord>,
}

impl ExperimentReport {
    pub fn any_side_exceeds_failure_cap(&self) -> bool {
        self.sides.iter().any(|s| s.exceeds_failure_cap)
    }

    /// Replicate table as CSV, one row per replicate and columns
    /// `side,replicate,n_points,ok,on_boundary,theta_hat{k},se{k},lower{k},upper{k},error`.
    pub fn records_csv(&self) -> Result<String> {
        let p = self.plan.theta.len();
        let mut wtr = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["side".to_string(), "replicate".into(), "n_points".into(), "ok".into(), "on_boundary".into()];
        for prefix in ["theta_hat", "se", "lower", "upper"] {
            for k in 1..=p {
                header.push(format!("{prefix}{k}"));
            }
        }
        header.push("error".into());
        wtr.write_record(&header)?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for r in &self.records {
            let mut row = vec![
                r.side.to_string(),
                r.replicate.to_string(),
                r.n_points.to_string(),
                r.error.is_none().to_string(),
                r.on_boundary.to_string(),
            ];
            for k in 0..p {
                row.push(opt(r.theta_hat.as_ref().map(|t| t[k])));
            }
            for k in 0..p {
                row.push(opt(r.std_error.as_ref().map(|t| t[k])));
            }
            for side in 0..2 {
                for k in 0..p {
                    row.push(opt(r.intervals.as_ref().map(|t| t[k][side])));
                }
            }
            row.push(r.error.clone().unwrap_or_default());
            wtr.write_record(&row)?;
        }
        let bytes = wtr.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Runs one replicate: simulate on the observation window, then fit on the
/// estimation window.
pub fn run_replicate(plan: &ExperimentPlan, side_index: usize, replicate: usize) -> ReplicateRecord {
    let side = plan.window_sides[side_index];
    let stream = (side_index * plan.replicates + replicate) as u64;
    let mut rec = ReplicateRecord {
        side,
        replicate,
        n_points: 0,
        theta_hat: None,
        std_error: None,
        intervals: None,
        on_boundary: false,
        error: None,
    };
    let outcome = (|| -> Result<()> {
        let (est, obs) = plan.windows(side)?;
        let sc = plan.sampler_config(&obs, stream);
        let (cfg, _) = simulate(&plan.model, &plan.theta, &obs, &sc)?;
        let quad = QuadratureScheme::stratified(
            &est,
            plan.quad_resolution.unwrap_or_else(|| default_resolution(&plan.model)),
        )?;
        let opts = FitOptions {
            starts: plan.starts.unwrap_or(FitOptions::default().starts),
            seed: plan.seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15),
            level: plan.level,
            compute_ci: plan.computes_intervals(),
            cell_side: Some(plan.cell_side()),
            ..Default::default()
        };
        rec.n_points = cfg.count_in(&est);
        let fit = fit_mple(&cfg, &plan.model, &plan.parameter_box, &est, &quad, &opts)?;
        rec.on_boundary = fit.on_boundary;
        rec.std_error = fit.standard_errors();
        rec.intervals = fit.ci.map(|c| c.intervals);
        rec.theta_hat = Some(fit.theta_hat.as_slice().to_vec());
        Ok(())
    })();
    if let Err(e) = outcome {
        rec.error = Some(e.to_string());
    }
    rec
}

/// Runs every replicate of every side in parallel and assembles the report
/// in plan order. The result does not depend on the number of threads.
pub fn run_experiment(plan: &ExperimentPlan) -> Result<ExperimentReport> {
    plan.validate()?;
    let jobs: Vec<(usize, usize)> = (0..plan.window_sides.len())
        .flat_map(|s| (0..plan.replicates).map(move |r| (s, r)))
        .collect();
    let records: Vec<ReplicateRecord> = jobs
        .par_iter()
        .map(|&(s, r)| run_replicate(plan, s, r))
        .collect();
    let sides = plan
        .window_sides
        .iter()
        .enumerate()
        .map(|(s, &side)| {
            let recs = &records[s * plan.replicates..(s + 1) * plan.replicates];
            summarize_side(plan, side, recs)
        })
        .collect();
    Ok(ExperimentReport {
        plan: plan.clone(),
        sides,
        records,
    })
}

pub fn summarize_side(plan: &ExperimentPlan, side: f64, recs: &[ReplicateRecord]) -> SideSummary {
    let ok: Vec<&ReplicateRecord> = recs.iter().filter(|r| r.theta_hat.is_some()).collect();
    let failed = recs.len() - ok.len();
    let failure_rate = failed as f64 / recs.len().max(1) as f64;
    let with_ci = plan.computes_intervals() && recs.len() > 1;
    let parameters = (0..plan.theta.len())
        .map(|k| {
            let truth = plan.theta[k];
            let est: Vec<f64> = ok.iter().map(|r| r.theta_hat.as_ref().unwrap()[k]).collect();
            let err: Vec<f64> = est.iter().map(|e| e - truth).collect();
            let mut abs: Vec<f64> = err.iter().map(|e| e.abs()).collect();
            let studentized: Vec<f64> = ok
                .iter()
                .filter_map(|r| {
                    let se = r.std_error.as_ref()?[k];
                    (se > 0.0).then(|| (r.theta_hat.as_ref().unwrap()[k] - truth) / se)
                })
                .collect();
            let covered = ok
                .iter()
                .filter_map(|r| r.intervals.as_ref().map(|iv| iv[k][0] <= truth && truth <= iv[k][1]))
                .collect::<Vec<_>>();
            let half: Vec<f64> = ok
                .iter()
                .filter_map(|r| r.intervals.as_ref().map(|iv| 0.5 * (iv[k][1] - iv[k][0])))
                .collect();
            let (skew, kurt) = shape_moments(&studentized).unzip();
            ParameterSummary {
                mean: mean(&est),
                rmse: mean(&err.iter().map(|e| e * e).collect::<Vec<_>>()).sqrt(),
                median_abs_error: median(&mut abs),
                coverage: (with_ci && !covered.is_empty())
                    .then(|| covered.iter().filter(|c| **c).count() as f64 / covered.len() as f64),
                mean_half_width: (with_ci && !half.is_empty()).then(|| mean(&half)),
                studentized_skewness: if with_ci { skew } else { None },
                studentized_excess_kurtosis: if with_ci { kurt } else { None },
            }
        })
        .collect();
    SideSummary {
        side,
        area: side * side,
        replicates: recs.len(),
        succeeded: ok.len(),
        failed,
        on_boundary: ok.iter().filter(|r| r.on_boundary).count(),
        failure_rate,
        exceeds_failure_cap: failure_rate > FAILURE_CAP,
        parameters,
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Sample skewness `m₃/m₂^{3/2}` and excess kurtosis `m₄/m₂² − 3` from
/// central moments.
pub fn shape_moments(v: &[f64]) -> Option<(f64, f64)> {
    if v.len() < 3 {
        return None;
    }
    let m = mean(v);
    let n = v.len() as f64;
    let (m2, m3, m4) = v.iter().fold((0.0, 0.0, 0.0), |(a, b, c), x| {
        let d = x - m;
        (a + d * d, b + d * d * d, c + d * d * d * d)
    });
    let (m2, m3, m4) = (m2 / n, m3 / n, m4 / n);
    if m2 == 0.0 {
        return None;
    }
    Some((m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn poisson_plan(replicates: usize) -> ExperimentPlan {
        ExperimentPlan {
            model: ModelSpec::poisson(),
            theta: Theta::new(vec![-(2.0_f64.ln())]).unwrap(),
            parameter_box: ParameterBox::new(
                Theta::new(vec![-6.0]).unwrap(),
                Theta::new(vec![6.0]).unwrap(),
            )
            .unwrap(),
            window_sides: vec![3.0, 6.0],
            replicates,
            level: 0.95,
            seed: 5,
            output_dir: None,
            sampler: None,
            quad_resolution: None,
            cell_side: None,
            starts: Some(1),
        }
    }

    #[test]
    fn moments_of_known_samples() {
        let (s, k) = shape_moments(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(s.abs() < 1e-15);
        assert!((k - (-1.36)).abs() < 1e-12);
        let (s, _) = shape_moments(&[0.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((s - 1.1547005383792517).abs() < 1e-12);
        assert!(shape_moments(&[1.0, 1.0, 1.0]).is_none());
    }

    #[test]
    fn plan_validation() {
        let mut p = poisson_plan(3);
        p.validate().unwrap();
        p.replicates = 0;
        assert!(p.validate().is_err());
        let mut p = poisson_plan(3);
        p.window_sides = vec![4.0, 4.0];
        assert!(p.validate().is_err());
        let mut p = poisson_plan(3);
        p.theta = Theta::new(vec![7.0]).unwrap();
        assert!(p.validate().is_err());
    }

    #[test]
    fn plan_json_round_trip() {
        let p = poisson_plan(4);
        let s = serde_json::to_string(&p).unwrap();
        let back: ExperimentPlan = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
        let minimal = r#"{"model":{"family":"poisson"},"theta":[0.0],"box":{"lower":[-1.0],"upper":[1.0]},
            "window_sides":[2.0],"replicates":2,"seed":1}"#;
        let m: ExperimentPlan = serde_json::from_str(minimal).unwrap();
        assert_eq!(m.level, 0.95);
    }

    #[test]
    fn single_replicate_marks_coverage_not_applicable() {
        let r = run_experiment(&poisson_plan(1)).unwrap();
        for s in &r.sides {
            assert_eq!(s.replicates, 1);
            assert!(s.parameters[0].coverage.is_none());
        }
    }

    #[test]
    fn deterministic_report() {
        let a = run_experiment(&poisson_plan(6)).unwrap();
        let b = run_experiment(&poisson_plan(6)).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.records_csv().unwrap(), b.records_csv().unwrap());
        assert_eq!(a.records.len(), 12);
        assert!(a.records.iter().all(|r| r.error.is_none()), "{:?}", a.records);
        let csv = a.records_csv().unwrap();
        assert!(csv.starts_with("side,replicate,n_points,ok,on_boundary,theta_hat1,se1,lower1,upper1,error\n"));
    }
}
