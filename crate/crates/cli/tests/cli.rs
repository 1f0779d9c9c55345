use std::fs;
use std::path::Path;
use std::process::Command as Process;

use parabolic::experiments::{Check, Report, Table};
use parabolic::field::{write_csv, Field, Grid, GridSpec, Rank};
use parabolic::pde::{mollified_point_mass, solve_linear, LinearTensor, ProblemData, SolverConfig};
use parabolic_cli::*;

fn bin() -> Process {
    Process::new(env!("CARGO_BIN_EXE_parabolic"))
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn minimal_solve_config_takes_defaults() {
    let cfg = parse_config("schema = 1\n[solve]\n").unwrap();
    assert_eq!(cfg, RunConfig::default());
    assert_eq!(cfg.grid_spec().h, 1.0 / 32.0);
    assert_eq!(cfg.solver_config(), SolverConfig::default());
    let with_law = parse_config("schema = 1\n[law]\nkind = \"linear\"\nnu = 2.0\n").unwrap();
    assert_eq!(with_law.law, Some(config::LawConfig::Linear { nu: 2.0 }));
}

#[test]
fn unknown_keys_are_named() {
    let err = parse_config("schema = 1\nfoo = 3\n").unwrap_err();
    assert!(err.to_string().contains("foo"), "{err}");
    let err = parse_config("schema = 1\n[grid]\nfoo = 3\n").unwrap_err();
    assert!(err.to_string().contains("foo"), "{err}");
    assert!(parse_config("[grid]\ncells = 8\n").unwrap_err().to_string().contains("schema"));
}

#[test]
fn every_violation_is_listed() {
    let text = "schema = 2\n[weights]\nq0 = 3.0\nps = [3.0, 2.0]\n[truncate]\nw = \"/nonexistent/w.csv\"\n";
    let err = parse_config(text).unwrap_err();
    let all = err.problems.join("\n");
    for needle in ["schema must be 1", "q0", "ladder must be increasing", "given together", "no such file"] {
        assert!(all.contains(needle), "missing `{needle}` in\n{all}");
    }
}

#[test]
fn descending_level_ladder_is_a_usage_error() {
    let err = parse_config("schema = 1\n[truncate]\nlambdas = [4.0, 2.0, 1.0]\n").unwrap_err();
    assert!(err.to_string().contains("ladder must be increasing"), "{err}");
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.toml", "schema = 1\n[truncate]\nlambdas = [4.0, 2.0, 1.0]\n");
    let out = bin().args(["truncate", "--config"]).arg(&cfg).arg("--out").arg(dir.path().join("o")).output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ladder must be increasing"));
    assert!(!dir.path().join("o").exists());
}

const CONVERGENCE: &str = "schema = 1\n[study]\nname = \"convergence\"\nladder = [8, 16, 32]\n";

#[test]
fn passing_study_writes_csv_svg_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.toml", CONVERGENCE);
    let out_dir = dir.path().join("o");
    let out = bin().args(["study", "--config"]).arg(&cfg).arg("--out").arg(&out_dir).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(EXIT_OK), "{stdout}{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout.lines().count(), 1);
    assert!(stdout.contains("PASS"));
    let csv = fs::read_to_string(out_dir.join("convergence.csv")).unwrap();
    assert!(csv.starts_with("cells,h,tau,l2_error,grad_error\n"));
    assert_eq!(csv.lines().count(), 4);
    let svg = fs::read_to_string(out_dir.join("convergence.svg")).unwrap();
    assert_eq!(svg.matches("class=\"marker\"").count(), 3);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["passed"], true);
    let c = &summary["criteria"]["value ratio 1"];
    assert_eq!(c["passed"], true);
    assert!(c["value"].as_f64().unwrap() > 3.0 && c["bound"] == 5.0);
    // no temporaries left behind
    assert!(fs::read_dir(&out_dir).unwrap().all(|e| !e.unwrap().file_name().to_string_lossy().starts_with('.')));
}

#[test]
fn reruns_are_byte_identical() {
    let cfg = parse_config("schema = 1\nseed = 5\n[study]\nname = \"good-lambda\"\nladder = [4.0, 8.0]\n[grid]\ncells = 24\nsteps = 24\n").unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let (code, line) = execute(Command::Study, &cfg, &Overrides { out: Some(d.path().to_path_buf()), seed: None });
        assert!(code == EXIT_OK || code == EXIT_CRITERIA, "{line}");
    }
    for name in ["good_lambda.csv", "summary.json"] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
    }
}

#[test]
fn empty_ladder_gives_header_only_and_no_plot() {
    let dir = tempfile::tempdir().unwrap();
    let text = "schema = 1\n[study]\nname = \"good-lambda\"\n[grid]\ncells = 16\nsteps = 16\n[forcing]\nmass = 0.0\n";
    let cfg = parse_config(text).unwrap();
    // a stale plot from an earlier run must not survive
    fs::write(dir.path().join("good_lambda.svg"), "<svg/>").unwrap();
    let (_, line) = execute(Command::Study, &cfg, &Overrides { out: Some(dir.path().to_path_buf()), seed: None });
    let csv = fs::read_to_string(dir.path().join("good_lambda.csv")).unwrap();
    assert_eq!(csv, "k,lambda,eps,omega_o,omega_u,ratio\n", "{line}");
    assert!(!dir.path().join("good_lambda.svg").exists());
}

#[test]
fn five_point_plot_has_five_markers_and_a_fit() {
    let pts: Vec<(f64, f64)> = (0..5).map(|j| (2f64.powi(j), 3.0 * 2f64.powi(-2 * j))).collect();
    let svg = loglog_svg("decay <test>", "x", "y", &pts).unwrap();
    assert!(svg.starts_with("<svg xmlns=\"http://www.w3.org/2000/svg\""));
    assert_eq!(svg.matches("<circle").count(), 5);
    assert_eq!(svg.matches("class=\"fit\"").count(), 1);
    assert!(svg.contains("slope -2.0000"));
    assert!(svg.contains("decay &lt;test&gt;"));
    assert!(loglog_svg("t", "x", "y", &[]).is_none());
    assert!(loglog_svg("t", "x", "y", &[(1.0, 0.0), (-1.0, 2.0)]).is_none());
    let one = loglog_svg("t", "x", "y", &[(1.0, 1.0)]).unwrap();
    assert!(one.contains("<circle") && !one.contains("class=\"fit\""));
}

#[test]
fn nan_is_rejected_before_anything_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("o");
    let mut t = Table::new(&["a", "b"]);
    t.push(vec![1.0, f64::NAN]);
    assert!(Artifact::table("t.csv", &t).unwrap_err().contains("column b"));

    let report = Report {
        study: "probe".into(),
        table: Table::new(&["a"]),
        extra: Vec::new(),
        recorded: vec![("broken".into(), f64::NAN)],
        checks: vec![Check::at_most("fine", 1.0, 2.0)],
    };
    let ok = Artifact { name: "a.csv".into(), contents: Some(b"a\n".to_vec()) };
    let o = Outcome { command: "study".into(), report, artifacts: vec![ok], stopped: None };
    let err = emit(&o, &out_dir, None).unwrap_err();
    assert!(err.contains("broken"), "{err}");
    assert!(!out_dir.exists());

    let g = Grid::new(GridSpec::uniform(1, 1, 4, 1.0, 4, 1.0)).unwrap();
    let mut f = Field::zeros(&g, Rank::Scalar);
    f.values_mut()[2] = f64::NAN;
    assert!(Artifact::field("f.csv", &f).is_err());
}

#[test]
fn infinite_values_survive_as_strings() {
    let report = Report {
        study: "probe".into(),
        table: Table::new(&["a"]),
        extra: Vec::new(),
        recorded: vec![("slope".into(), f64::INFINITY)],
        checks: Vec::new(),
    };
    let o = Outcome { command: "study".into(), report, artifacts: Vec::new(), stopped: None };
    let v: serde_json::Value = serde_json::from_str(&report::summary_json(&o, Some(3)).unwrap()).unwrap();
    assert_eq!(v["recorded"]["slope"], "inf");
    assert_eq!(v["seed"], 3);
}

/// Heat solution and its forcing written as field files; `scale` multiplies
/// the forcing so that the pair no longer solves the equation.
fn heat_files(dir: &Path, scale: f64) -> (std::path::PathBuf, std::path::PathBuf) {
    let h = 1.0 / 32.0;
    let tau = 10.0 * h * h;
    let g = Grid::new(GridSpec::new(1, 1, vec![1.0], 24.0 * tau, h, tau)).unwrap();
    let mass = mollified_point_mass(&g, &[0.45], 7.0 * tau, 2.0 * h, 1.0).unwrap();
    let f = Field::from_values(&g, Rank::Matrix(1, 1), mass.values().to_vec()).unwrap();
    let sol = solve_linear(&LinearTensor::constant(&g, 1.0).unwrap(), &ProblemData::homogeneous(f.clone()), &SolverConfig::default())
        .unwrap();
    let (w, d) = (dir.join("w.csv"), dir.join("data.csv"));
    write_csv(&sol.u, fs::File::create(&w).unwrap()).unwrap();
    write_csv(&f.scaled(scale), fs::File::create(&d).unwrap()).unwrap();
    (w, d)
}

#[test]
fn inconsistent_pair_fails_and_names_the_gate() {
    let dir = tempfile::tempdir().unwrap();
    let (w, d) = heat_files(dir.path(), 1.5);
    let text = format!("schema = 1\n[truncate]\nw = {:?}\ndata = {:?}\nsolver_residual = 1e-12\n", w, d);
    let cfg = write(dir.path(), "run.toml", &text);
    let out_dir = dir.path().join("o");
    let out = bin().args(["truncate", "--config"]).arg(&cfg).arg("--out").arg(&out_dir).output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_CRITERIA));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("residual gate") && err.contains("exceeds gate"), "{err}");
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["criteria"]["residual gate"]["passed"], false);
    assert_eq!(summary["passed"], false);
    assert_eq!(fs::read_to_string(out_dir.join("truncation.csv")).unwrap().lines().count(), 1);
}

#[test]
fn consistent_generated_pair_passes_the_ladder() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config("schema = 1\n[grid]\ncells = 32\nsteps = 24\nt_final = 0.234375\n[truncate]\npoints = 4\n").unwrap();
    let (code, line) = execute(Command::Truncate, &cfg, &Overrides { out: Some(dir.path().to_path_buf()), seed: Some(1) });
    assert_eq!(code, EXIT_OK, "{line}");
    let csv = fs::read_to_string(dir.path().join("truncation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(dir.path().join("truncation.svg").exists());
}

#[test]
fn maximal_weights_whitney_and_solve_run() {
    let grid = "[grid]\ncells = 16\nsteps = 16\n";
    for (cmd, files) in [
        (Command::Maximal, &["maximal.csv", "radii.csv"][..]),
        (Command::Weights, &["weight.csv", "weights.csv", "weights.svg"][..]),
        (Command::Whitney, &["cover.csv", "levels.csv"][..]),
        (Command::Solve, &["solution.csv", "increments.csv"][..]),
    ] {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse_config(&format!("schema = 1\n{grid}")).unwrap();
        let (code, line) = execute(cmd, &cfg, &Overrides { out: Some(dir.path().to_path_buf()), seed: None });
        assert_eq!(code, EXIT_OK, "{line}");
        for f in files.iter().chain(&["summary.json"]) {
            assert!(dir.path().join(f).exists(), "{} lacks {f}", cmd.as_str());
        }
    }
}

#[test]
fn bad_thread_count_is_a_usage_error() {
    let out = bin().arg("maximal").env("PARABOLIC_THREADS", "zero").output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
}
