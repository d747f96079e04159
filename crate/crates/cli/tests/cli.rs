use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_gibbs-mple"));
    c.env_remove("GIBBS_MPLE_OUT_DIR");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn write(p: &Path, s: &str) -> String {
    fs::write(p, s).unwrap();
    p.to_str().unwrap().to_string()
}

/// 37 points on [0,10]², deterministic.
fn poisson_pattern(dir: &Path) -> String {
    let mut csv = String::from("x,y\n");
    for k in 0..37 {
        let x = (k as f64 * 0.618_033_988_75).fract() * 10.0;
        let y = (k as f64 * 0.414_213_562_37 + 0.05).fract() * 10.0;
        csv.push_str(&format!("{x},{y}\n"));
    }
    write(&dir.join("window_only.window.json"), r#"{"window":[0,10,0,10]}"#);
    write(&dir.join("window_only.csv"), &csv)
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let model = write(
        &dir.path().join("lj.json"),
        r#"{"family":"lennard_jones","D":0.5,"theta":[-1.0,0.5,0.2]}"#,
    );
    let mut outputs = Vec::new();
    for run_dir in ["a", "b"] {
        let out = dir.path().join(run_dir);
        let o = run(&[
            "simulate", "--model", &model, "--window", "0,8,0,8", "--seed", "7", "--out-dir",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let files: Vec<Vec<u8>> = ["pattern.csv", "pattern.window.json", "stats.json"]
            .iter()
            .map(|f| fs::read(out.join(f)).unwrap())
            .collect();
        outputs.push(files);
    }
    assert_eq!(outputs[0], outputs[1]);
    let stats = read_json(&dir.path().join("a/stats.json"));
    assert!(stats["chain"]["acceptance_rates"]["birth"].as_f64().unwrap() > 0.0);
    assert!(stats["n_points"].as_u64().unwrap() > 0);
}

#[test]
fn simulate_respects_out_dir_env() {
    let dir = tempfile::tempdir().unwrap();
    let model = write(&dir.path().join("p.json"), r#"{"family":"poisson","theta":[0.0]}"#);
    let o = bin()
        .args(["simulate", "--model", &model, "--window", "0,2,0,2"])
        .env("GIBBS_MPLE_OUT_DIR", dir.path().join("env_out"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(dir.path().join("env_out/pattern.csv").exists());
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let model = write(&dir.path().join("p.json"), r#"{"family":"poisson","theta":[0.0]}"#);
    let o = run(&["simulate", "--model", &model, "--window", "0,-8,0,8"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let bad = write(&dir.path().join("bad.json"), r#"{"family":"strauss","R":0.5,"box":{"lower":"x"}}"#);
    let o = run(&["simulate", "--model", &bad, "--window", "0,8,0,8", "--theta", "0,0"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("`box`"), "{}", stderr(&o));
    let o = run(&["fit", "--model"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn fit_poisson_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let pattern = poisson_pattern(dir.path());
    let model = write(&dir.path().join("p.json"), r#"{"family":"poisson"}"#);
    let out = dir.path().join("out");
    let o = run(&["fit", "--model", &model, "--pattern", &pattern, "--out-dir", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let fit = read_json(&out.join("fit.json"));
    let t = fit["theta_hat"][0].as_f64().unwrap();
    assert!((t + 0.37_f64.ln()).abs() < 1e-8, "{t}");
    assert_eq!(fit["ci"]["level"], 0.95);
    assert!(fit["cov"][0][0].as_f64().unwrap() > 0.0);
}

#[test]
fn infinite_range_with_ci_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let pattern = poisson_pattern(dir.path());
    let model = write(
        &dir.path().join("lj.json"),
        r#"{"family":"lennard_jones","D":"inf","truncation_radius":2.0}"#,
    );
    let o = run(&["fit", "--model", &model, "--pattern", &pattern, "--ci"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("holds only for the finite-range"), "{}", stderr(&o));
    assert!(!Path::new("fit.json").exists());
}

#[test]
fn border_correction_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let pattern = poisson_pattern(dir.path());
    let model = write(&dir.path().join("s.json"), r#"{"family":"strauss","R":1.0}"#);
    let o = run(&[
        "fit", "--model", &model, "--pattern", &pattern, "--estimation-window", "0.5,9.5,0.5,9.5",
        "--no-ci",
    ]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("dilated by"));
}

#[test]
fn quadrature_refinement_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let model = write(
        &dir.path().join("lj.json"),
        r#"{"family":"lennard_jones","D":0.5,"theta":[-1.0,0.5,0.2],
            "box":{"lower":[-6,0.05,0.05],"upper":[4,5,0.45]}}"#,
    );
    let sim = dir.path().join("sim");
    let o = run(&[
        "simulate", "--model", &model, "--window", "0,6,0,6", "--seed", "3", "--out-dir",
        sim.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let pattern = sim.join("pattern.csv");
    let mut log_pl = Vec::new();
    for res in ["20", "40"] {
        let out = dir.path().join(format!("fit{res}"));
        let o = run(&[
            "fit", "--model", &model, "--pattern", pattern.to_str().unwrap(), "--quad-resolution", res,
            "--out-dir", out.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let fit = read_json(&out.join("fit.json"));
        assert!(fit["diagnostics"]["quadrature"]["refinement_gap"].as_f64().unwrap() < 1e-3);
        log_pl.push(fit["diagnostics"]["u_n"].as_f64().unwrap());
    }
    assert!((log_pl[0] - log_pl[1]).abs() < 1e-3, "{log_pl:?}");

    // a deliberately coarse grid is refused
    let o = run(&[
        "fit", "--model", &model, "--pattern", pattern.to_str().unwrap(), "--quad-resolution", "2",
        "--refine-tol", "1e-6", "--out-dir", dir.path().join("coarse").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("too coarse"));
}

#[test]
fn gnz_empty_pattern_and_calibration() {
    let dir = tempfile::tempdir().unwrap();
    write(&dir.path().join("empty.window.json"), r#"{"window":[0,4,0,4]}"#);
    let empty = write(&dir.path().join("empty.csv"), "x,y\n");
    let poisson = write(&dir.path().join("p.json"), r#"{"family":"poisson","theta":[0.0]}"#);
    let out = dir.path().join("g0");
    let o = run(&["gnz", "--model", &poisson, "--pattern", &empty, "--out-dir", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let g = read_json(&out.join("gnz.json"));
    assert_eq!(g["residuals"][0]["test_function"], "constant");
    assert!((g["residuals"][0]["residual"].as_f64().unwrap() + 1.0).abs() < 1e-12);

    let model = write(
        &dir.path().join("s.json"),
        r#"{"family":"strauss","R":0.5,"theta":[0.0,0.7]}"#,
    );
    let sim = dir.path().join("sim");
    let o = run(&[
        "simulate", "--model", &model, "--window", "0,7,0,7", "--seed", "21", "--out-dir",
        sim.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let pattern = sim.join("pattern.csv");
    let studentized = |theta: &str, name: &str| -> Vec<f64> {
        let out = dir.path().join(name);
        let o = run(&[
            "gnz", "--model", &model, "--theta", theta, "--pattern", pattern.to_str().unwrap(),
            "--replicates", "40", "--seed", "5", "--out-dir", out.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let g = read_json(&out.join("gnz.json"));
        (0..3).map(|k| g["residuals"][k]["studentized"].as_f64().unwrap()).collect()
    };
    for z in studentized("0,0.7", "at_theta") {
        assert!(z.abs() <= 3.0, "{z}");
    }
    // θ₁ + 1 predicts e⁻¹ of the observed intensity
    let shifted = studentized("1,0.7", "shifted");
    assert!(shifted[0] > 3.0, "{shifted:?}");
}

#[test]
fn diagnose_reports_cell_scores() {
    let dir = tempfile::tempdir().unwrap();
    let pattern = poisson_pattern(dir.path());
    let model = write(&dir.path().join("s.json"), r#"{"family":"strauss","R":1.0,"theta":[1.0,0.5]}"#);
    let out = dir.path().join("d");
    let o = run(&["diagnose", "--model", &model, "--pattern", &pattern, "--out-dir", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let d = read_json(&out.join("diagnose.json"));
    let cells = d["score"]["per_cell"].as_array().unwrap();
    assert_eq!(cells.len(), 64);
    let total: f64 = cells.iter().map(|c| c["score"][0].as_f64().unwrap()).sum();
    let g0 = d["grad"][0].as_f64().unwrap();
    assert!((total - g0).abs() <= 1e-10 * g0.abs().max(1.0));
}

fn poisson_plan(dir: &Path, replicates: usize, sides: &str) -> String {
    write(
        &dir.join(format!("plan{replicates}.json")),
        &format!(
            r#"{{"model":{{"family":"poisson"}},"theta":[-0.5],"box":{{"lower":[-6],"upper":[6]}},
               "window_sides":{sides},"replicates":{replicates},"level":0.95,"seed":17}}"#
        ),
    )
}

#[test]
fn coverage_single_replicate_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let plan = poisson_plan(dir.path(), 1, "[4.0,8.0]");
    let o = run(&["coverage", "--plan", &plan, "--out-dir", dir.path().join("one").to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let s = read_json(&dir.path().join("one/summary.json"));
    assert!(s["sides"][0]["parameters"][0]["coverage"].is_null());

    let plan = poisson_plan(dir.path(), 8, "[4.0,8.0]");
    let mut bytes = Vec::new();
    for (name, jobs) in [("r1", "1"), ("r2", "2")] {
        let out = dir.path().join(name);
        let o = run(&["--jobs", jobs, "coverage", "--plan", &plan, "--out-dir", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        bytes.push((fs::read(out.join("summary.json")).unwrap(), fs::read(out.join("replicates.csv")).unwrap()));
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn coverage_poisson_200_replicates() {
    let dir = tempfile::tempdir().unwrap();
    // 256 unit cells; on smaller windows the block estimate has few effective
    // degrees of freedom and coverage drops toward 0.9
    let plan = poisson_plan(dir.path(), 200, "[16.0]");
    let out = dir.path().join("cov");
    let o = run(&["coverage", "--plan", &plan, "--out-dir", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let s = read_json(&out.join("summary.json"));
    let c = s["sides"][0]["parameters"][0]["coverage"].as_f64().unwrap();
    assert!((0.90..=0.99).contains(&c), "coverage {c}");
}
