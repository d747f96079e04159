mod inputs;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gibbs_mple::experiment::run_experiment;
use gibbs_mple::inference::{check_intervals_supported, default_cell_side};
use gibbs_mple::pseudolik::default_resolution;
use gibbs_mple::{
    estimation_window, fit_mple, gnz_residuals, io, simulate, Configuration, Error, ErrorClass,
    ExperimentPlan, FitOptions, ModelSpec, PseudoLikelihood, QuadratureScheme, SamplerConfig,
    TestFunction, Theta, Window,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use inputs::{default_box, parse_theta, parse_window, read_model, ModelFile};

const OUT_DIR_ENV: &str = "GIBBS_MPLE_OUT_DIR";

#[derive(Parser)]
#[command(name = "gibbs-mple", version, about = "Simulate and fit pairwise Gibbs point processes")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a pattern with the birth-death-move sampler.
    Simulate(SimulateArgs),
    /// Maximum pseudo-likelihood fit with sandwich confidence intervals.
    Fit(FitArgs),
    /// GNZ residuals of a pattern for three test functions.
    Gnz(GnzArgs),
    /// Monte-Carlo coverage and consistency experiment.
    Coverage(CoverageArgs),
    /// Pseudo-likelihood value, gradient, Hessian and per-cell scores at a given theta.
    Diagnose(DiagnoseArgs),
}

#[derive(Args)]
struct Common {
    /// Model JSON (family fields plus optional `theta` and `box`).
    #[arg(long)]
    model: PathBuf,
    /// Overrides `theta` from the model file, e.g. `-1,0.5,0.2`.
    #[arg(long, allow_hyphen_values = true)]
    theta: Option<String>,
    /// Output directory [default: $GIBBS_MPLE_OUT_DIR or .].
    #[arg(long, env = OUT_DIR_ENV)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct PatternArgs {
    /// Pattern CSV with header `x,y`; the window is read from its sidecar.
    #[arg(long)]
    pattern: PathBuf,
    /// Observation window `x_min,x_max,y_min,y_max`, overriding the sidecar.
    #[arg(long, allow_hyphen_values = true)]
    window: Option<String>,
    /// Estimation window; defaults to the observation window eroded by the
    /// interaction range, rounded down to whole cells.
    #[arg(long, allow_hyphen_values = true)]
    estimation_window: Option<String>,
    /// Side of the cells of the score covariance [default: interaction range, 1 for Poisson].
    #[arg(long)]
    cell_side: Option<f64>,
    /// Quadrature nodes per unit length [default: 20 per interaction range].
    #[arg(long)]
    quad_resolution: Option<f64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, allow_hyphen_values = true)]
    window: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sampler settings JSON: any of n_steps, burn_in, p_birth, p_death,
    /// p_move, move_sigma, trace_every.
    #[arg(long)]
    sampler: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    burn_in: Option<u64>,
    /// Base name of the pattern files.
    #[arg(long, default_value = "pattern")]
    name: String,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    pattern: PatternArgs,
    /// Skip the covariance and interval stage.
    #[arg(long, conflicts_with = "ci")]
    no_ci: bool,
    /// Require intervals (refused for infinite-range models).
    #[arg(long)]
    ci: bool,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long, default_value_t = 5)]
    starts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Largest accepted change of `log_pl/|Λ|` at the estimate when the
    /// quadrature resolution is doubled; negative disables the check.
    #[arg(long, default_value_t = 1e-3, allow_hyphen_values = true)]
    refine_tol: f64,
}

#[derive(Args)]
struct GnzArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    pattern: PatternArgs,
    /// Simulated patterns at theta used for Monte-Carlo standard errors.
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CoverageArgs {
    /// Experiment plan JSON.
    #[arg(long)]
    plan: PathBuf,
    #[arg(long, env = OUT_DIR_ENV)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    pattern: PatternArgs,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SamplerSettings {
    n_steps: Option<u64>,
    burn_in: Option<u64>,
    p_birth: Option<f64>,
    p_death: Option<f64>,
    p_move: Option<f64>,
    move_sigma: Option<f64>,
    trace_every: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(j) = cli.jobs {
        if j == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .expect("thread pool is configured once");
    }
    let outcome = match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Gnz(a) => cmd_gnz(a),
        Command::Coverage(a) => cmd_coverage(a),
        Command::Diagnose(a) => cmd_diagnose(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>().map(Error::class) {
        Some(ErrorClass::Numerical) => 3,
        Some(ErrorClass::Geometry) => 4,
        _ => 2,
    }
}

fn out_dir(dir: &Option<PathBuf>) -> anyhow::Result<PathBuf> {
    let d = dir.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&d).map_err(|e| Error::Io(format!("{}: {e}", d.display())))?;
    Ok(d)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    fs::write(path, text + "\n").map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn model_and_theta(common: &Common) -> anyhow::Result<(ModelFile, Option<Theta>)> {
    let model = read_model(&common.model)?;
    let theta = match &common.theta {
        Some(s) => Some(parse_theta(s)?),
        None => model.theta.clone(),
    };
    if let Some(t) = &theta {
        model.spec.check_theta(t)?;
    }
    Ok((model, theta))
}

fn require_theta(theta: Option<Theta>) -> anyhow::Result<Theta> {
    theta.ok_or_else(|| {
        Error::InvalidArgument("theta is required: pass --theta or put `theta` in the model file".into())
            .into()
    })
}

/// Pattern, estimation window and quadrature for the pattern-based commands.
struct Prepared {
    cfg: Configuration,
    est: Window,
    quad: QuadratureScheme,
    cell_side: f64,
}

fn prepare(spec: &ModelSpec, a: &PatternArgs) -> anyhow::Result<Prepared> {
    let window = a.window.as_deref().map(parse_window).transpose()?;
    let cfg = io::read_pattern(&a.pattern, window)?;
    let cell_side = a.cell_side.unwrap_or_else(|| default_cell_side(spec));
    if !(cell_side > 0.0) || !cell_side.is_finite() {
        return Err(Error::InvalidArgument(format!("--cell-side must be positive, got {cell_side}")).into());
    }
    let est = match &a.estimation_window {
        Some(s) => parse_window(s)?,
        None => estimation_window(cfg.window(), spec.interaction_range(), cell_side)?,
    };
    let resolution = a.quad_resolution.unwrap_or_else(|| default_resolution(spec));
    let quad = QuadratureScheme::stratified(&est, resolution)?;
    Ok(Prepared {
        cfg,
        est,
        quad,
        cell_side,
    })
}

fn cmd_simulate(a: SimulateArgs) -> anyhow::Result<ExitCode> {
    let (model, theta) = model_and_theta(&a.common)?;
    let theta = require_theta(theta)?;
    let window = parse_window(&a.window)?;
    let mut sc = SamplerConfig::default_for(&model.spec, &theta, &window, a.seed);
    if let Some(p) = &a.sampler {
        let text = fs::read_to_string(p).map_err(|e| Error::Io(format!("{}: {e}", p.display())))?;
        let s: SamplerSettings = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidArgument(format!("{}: {e}", p.display())))?;
        sc.n_steps = s.n_steps.unwrap_or(sc.n_steps);
        sc.burn_in = s.burn_in.unwrap_or(sc.burn_in);
        sc.p_birth = s.p_birth.unwrap_or(sc.p_birth);
        sc.p_death = s.p_death.unwrap_or(sc.p_death);
        sc.p_move = s.p_move.unwrap_or(sc.p_move);
        sc.move_sigma = s.move_sigma.unwrap_or(sc.move_sigma);
        sc.trace_every = s.trace_every.unwrap_or(sc.trace_every);
    }
    sc.n_steps = a.steps.unwrap_or(sc.n_steps);
    sc.burn_in = a.burn_in.unwrap_or(sc.burn_in);
    sc.validate()?;

    let dir = out_dir(&a.common.out_dir)?;
    let (cfg, stats) = simulate(&model.spec, &theta, &window, &sc)?;
    let csv = dir.join(format!("{}.csv", a.name));
    io::write_pattern(&cfg, &csv)?;
    write_json(
        &dir.join("stats.json"),
        &json!({
            "model": model.spec,
            "theta": theta,
            "window": window,
            "sampler": sc,
            "n_points": cfg.len(),
            "chain": stats,
        }),
    )?;
    println!("{} points written to {}", cfg.len(), csv.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_fit(a: FitArgs) -> anyhow::Result<ExitCode> {
    let (model, _) = model_and_theta(&a.common)?;
    let spec = &model.spec;
    let compute_ci = if a.no_ci {
        false
    } else {
        // asked for explicitly, or by default for finite-range models
        a.ci || spec.is_finite_range()
    };
    let bx = model.parameter_box.clone().unwrap_or_else(|| default_box(spec));
    bx.validate_for(spec)?;
    let opts = FitOptions {
        starts: a.starts,
        seed: a.seed,
        level: a.level,
        compute_ci,
        cell_side: a.pattern.cell_side,
        ..Default::default()
    };
    opts.validate()?;
    if compute_ci {
        check_intervals_supported(spec)?;
    }
    let prep = prepare(spec, &a.pattern)?;
    let opts = FitOptions {
        cell_side: Some(prep.cell_side),
        ..opts
    };
    let fit = fit_mple(&prep.cfg, spec, &bx, &prep.est, &prep.quad, &opts)?;

    let fine = prep.quad.refined()?;
    let pl_fine = PseudoLikelihood::new(&prep.cfg, spec, &prep.est, &fine, None)?;
    let gap = (pl_fine.value(&fit.theta_hat)? - fit.log_pl_value).abs() / prep.est.area();
    if a.refine_tol >= 0.0 && gap > a.refine_tol {
        return Err(Error::Numerical(format!(
            "quadrature resolution {} is too coarse: doubling it changes log_pl/|area| by {gap:.3e} (tolerance {:.3e}); raise --quad-resolution",
            prep.quad.resolution(),
            a.refine_tol
        ))
        .into());
    }

    let mut report = serde_json::to_value(&fit).map_err(Error::from)?;
    report["diagnostics"]["quadrature"] = json!({
        "resolution": prep.quad.resolution(),
        "nodes": prep.quad.len(),
        "refinement_gap": gap,
    });
    report["diagnostics"]["estimation_window"] = json!(prep.est);
    report["diagnostics"]["model"] = json!(spec);
    let dir = out_dir(&a.common.out_dir)?;
    let path = dir.join("fit.json");
    write_json(&path, &report)?;
    let se = fit.standard_errors();
    for (k, t) in fit.theta_hat.as_slice().iter().enumerate() {
        match (&fit.ci, &se) {
            (Some(ci), Some(se)) => println!(
                "theta{} = {t:.6}  se = {:.6}  {:.0}% CI [{:.6}, {:.6}]",
                k + 1,
                se[k],
                100.0 * ci.level,
                ci.intervals[k][0],
                ci.intervals[k][1]
            ),
            _ => println!("theta{} = {t:.6}", k + 1),
        }
    }
    for w in &fit.warnings {
        eprintln!("warning: {w}");
    }
    println!("written to {}", path.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct GnzRow {
    test_function: &'static str,
    residual: f64,
    mc_mean: Option<f64>,
    mc_sd: Option<f64>,
    studentized: Option<f64>,
}

fn cmd_gnz(a: GnzArgs) -> anyhow::Result<ExitCode> {
    let (model, theta) = model_and_theta(&a.common)?;
    let theta = require_theta(theta)?;
    let spec = &model.spec;
    let prep = prepare(spec, &a.pattern)?;
    let observed = gnz_residuals(&prep.cfg, spec, &theta, &prep.est, &prep.quad)?;

    let mc = match a.replicates {
        Some(0) => return Err(Error::InvalidArgument("--replicates must be at least 1".into()).into()),
        Some(n) => {
            let obs = *prep.cfg.window();
            let runs: Vec<gibbs_mple::Result<[f64; 3]>> = (0..n as u64)
                .into_par_iter()
                .map(|r| {
                    let mut sc = SamplerConfig::default_for(spec, &theta, &obs, a.seed);
                    sc.stream = r;
                    let (sim, _) = simulate(spec, &theta, &obs, &sc)?;
                    gnz_residuals(&sim, spec, &theta, &prep.est, &prep.quad)
                })
                .collect();
            let runs = runs.into_iter().collect::<gibbs_mple::Result<Vec<_>>>()?;
            Some(runs)
        }
        None => None,
    };
    let rows: Vec<GnzRow> = TestFunction::ALL
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let (mean, sd) = match &mc {
                Some(runs) if runs.len() > 1 => {
                    let n = runs.len() as f64;
                    let m = runs.iter().map(|r| r[k]).sum::<f64>() / n;
                    let v = runs.iter().map(|r| (r[k] - m).powi(2)).sum::<f64>() / (n - 1.0);
                    (Some(m), Some(v.sqrt()))
                }
                Some(runs) => (Some(runs[0][k]), None),
                None => (None, None),
            };
            GnzRow {
                test_function: t.name(),
                residual: observed[k],
                mc_mean: mean,
                mc_sd: sd,
                studentized: sd.filter(|s| *s > 0.0).map(|s| observed[k] / s),
            }
        })
        .collect();

    println!("{:<16} {:>14} {:>14} {:>12}", "test_function", "residual", "mc_sd", "studentized");
    for r in &rows {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
        println!(
            "{:<16} {:>14.6e} {:>14} {:>12}",
            r.test_function,
            r.residual,
            f(r.mc_sd),
            f(r.studentized)
        );
    }
    let dir = out_dir(&a.common.out_dir)?;
    write_json(
        &dir.join("gnz.json"),
        &json!({
            "theta": theta,
            "estimation_window": prep.est,
            "replicates": a.replicates,
            "residuals": rows,
        }),
    )?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_coverage(a: CoverageArgs) -> anyhow::Result<ExitCode> {
    let text = fs::read_to_string(&a.plan)
        .map_err(|e| Error::Io(format!("{}: {e}", a.plan.display())))?;
    let plan: ExperimentPlan = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidArgument(format!("{}: {e}", a.plan.display())))?;
    plan.validate()?;
    let dir = out_dir(&a.out_dir.clone().or_else(|| plan.output_dir.clone()))?;
    let report = run_experiment(&plan)?;
    let csv = dir.join("replicates.csv");
    fs::write(&csv, report.records_csv()?).map_err(|e| Error::Io(format!("{}: {e}", csv.display())))?;
    write_json(&dir.join("summary.json"), &report)?;
    for s in &report.sides {
        let cov: Vec<String> = s
            .parameters
            .iter()
            .map(|p| p.coverage.map_or("n/a".into(), |c| format!("{c:.3}")))
            .collect();
        let rmse: Vec<String> = s.parameters.iter().map(|p| format!("{:.4}", p.rmse)).collect();
        println!(
            "side {:>6}: {}/{} ok, rmse [{}], coverage [{}]",
            s.side,
            s.succeeded,
            s.replicates,
            rmse.join(", "),
            cov.join(", ")
        );
    }
    if report.any_side_exceeds_failure_cap() {
        eprintln!(
            "error: more than {:.0}% of the replicates failed for at least one window size",
            100.0 * gibbs_mple::experiment::FAILURE_CAP
        );
        return Ok(ExitCode::from(3));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_diagnose(a: DiagnoseArgs) -> anyhow::Result<ExitCode> {
    let (model, theta) = model_and_theta(&a.common)?;
    let theta = require_theta(theta)?;
    let spec = &model.spec;
    let prep = prepare(spec, &a.pattern)?;
    let part = gibbs_mple::build_partition(&prep.est, prep.cell_side)?;
    let pl = PseudoLikelihood::new(&prep.cfg, spec, &prep.est, &prep.quad, Some(&part))?;
    let e = pl.evaluate(&theta, true)?;
    let hess = e.hess.expect("hessian requested");
    let rows: Vec<Vec<f64>> = (0..hess.nrows()).map(|i| hess.row(i).iter().copied().collect()).collect();
    let dir = out_dir(&a.common.out_dir)?;
    let path = dir.join("diagnose.json");
    write_json(
        &path,
        &json!({
            "theta": theta,
            "estimation_window": prep.est,
            "cell_side": prep.cell_side,
            "log_pl": e.value,
            "u_n": -e.value / prep.est.area(),
            "grad": e.grad.as_slice(),
            "hessian": rows,
            "score": e.breakdown,
        }),
    )?;
    println!("log_pl = {:.10e}", e.value);
    println!("written to {}", path.display());
    Ok(ExitCode::SUCCESS)
}
