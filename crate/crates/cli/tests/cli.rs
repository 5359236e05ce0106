use std::path::Path;
use std::process::{Command, Output};

use dode_core::io::{load_lambda_schedule, load_matrix_csv, read_report_csv};

const BASE: &str = r#"seed = 1

[schedule]
kind = "vp-linear"

[oracle]
kind = "gmm-ring"

[solver]
kind = "ddim"
steps = 3

[sample]
batch = 40

[distill]
batch = 30

[metrics]
batches = 2
samples = 50
reference = 100
projections = 16
"#;

fn dode(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dode")).args(args).output().unwrap()
}

fn dode_env(args: &[&str], key: &str, value: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dode")).args(args).env(key, value).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_config_is_a_usage_error() {
    let o = dode(&["sample", "--config", "/nonexistent/experiment.toml"]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&dode(&["frobnicate"])), 2);
    assert_eq!(code(&dode(&["sample"])), 2);
}

#[test]
fn unknown_keys_and_bad_values_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write_config(tmp.path(), "a.toml", &BASE.replace("steps = 3", "steps = 3\nstpes = 4"));
    assert_eq!(code(&dode(&["sample", "--config", &bad, "--out", s(&tmp.path().join("a"))])), 2);
    let bad = write_config(tmp.path(), "b.toml", &BASE.replace("kind = \"ddim\"", "kind = \"edm-heun\""));
    assert_eq!(code(&dode(&["sample", "--config", &bad, "--out", s(&tmp.path().join("b"))])), 2);
    let bad = write_config(tmp.path(), "c.toml", &BASE.replace("steps = 3", "steps = 0"));
    assert_eq!(code(&dode(&["sample", "--config", &bad, "--out", s(&tmp.path().join("c"))])), 2);
}

#[test]
fn sample_writes_deterministic_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "e.toml", BASE);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&dode(&["sample", "--config", &cfg, "--out", s(&a)])), 0);
    assert_eq!(code(&dode(&["sample", "--config", &cfg, "--out", s(&b)])), 0);
    let ends = std::fs::read(a.join("endpoints.csv")).unwrap();
    assert!(!ends.is_empty());
    assert_eq!(ends, std::fs::read(b.join("endpoints.csv")).unwrap());
    for f in ["resolved_config.toml", "metrics.csv", "trajectory.csv", "trajectory.bin"] {
        assert!(a.join(f).is_file(), "{f}");
    }
    let c = tmp.path().join("c");
    assert_eq!(code(&dode(&["sample", "--config", &cfg, "--seed", "2", "--out", s(&c)])), 0);
    assert_ne!(ends, std::fs::read(c.join("endpoints.csv")).unwrap());
}

#[test]
fn output_from_config_is_relative_to_it() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "e.toml", &format!("output = \"runs/x\"\n{BASE}"));
    let o = Command::new(env!("CARGO_BIN_EXE_dode"))
        .args(["sample", "--config", &cfg])
        .current_dir(std::env::temp_dir())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(tmp.path().join("runs/x/endpoints.csv").is_file());
    let resolved = std::fs::read_to_string(tmp.path().join("runs/x/resolved_config.toml")).unwrap();
    assert!(!resolved.contains("output"));
}

#[test]
fn unit_scale_distills_to_zero_and_resume_checks_arity() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "e.toml", &BASE.replace("batch = 30", "batch = 30\nscale = 1"));
    let out = tmp.path().join("d");
    assert_eq!(code(&dode(&["distill", "--config", &cfg, "--out", s(&out)])), 0);
    let l = load_lambda_schedule(&out.join("lambdas.json")).unwrap();
    assert!(l.values.iter().flatten().all(|v| v.abs() <= 1e-10));

    let resume = BASE.replace("batch = 30", &format!("batch = 30\nresume_from = \"{}\"", s(&out.join("lambdas.json"))));
    let ok = write_config(tmp.path(), "r.toml", &resume);
    assert_eq!(code(&dode(&["distill", "--config", &ok, "--out", s(&tmp.path().join("r"))])), 0);
    let mismatched = write_config(tmp.path(), "m.toml", &resume.replace("steps = 3", "steps = 4"));
    assert_eq!(code(&dode(&["distill", "--config", &mismatched, "--out", s(&tmp.path().join("m"))])), 2);
    let sample_mismatch = BASE.replace("steps = 3", "steps = 4").replace(
        "batch = 40",
        &format!("batch = 40\nlambdas = \"{}\"", s(&out.join("lambdas.json"))),
    );
    let sm = write_config(tmp.path(), "sm.toml", &sample_mismatch);
    assert_eq!(code(&dode(&["sample", "--config", &sm, "--out", s(&tmp.path().join("sm"))])), 2);
}

#[test]
fn distill_report_is_optimal_on_every_row() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "e.toml", &BASE.replace("steps = 3", "steps = 10"));
    let out = tmp.path().join("d");
    assert_eq!(code(&dode(&["distill", "--config", &cfg, "--out", s(&out)])), 0);
    let rows = read_report_csv(std::fs::File::open(out.join("distill_report.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 10);
    assert!(rows.iter().all(|r| r.obj_star <= r.obj0));
}

#[test]
fn ablate_axis_handling() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "e.toml", &format!("{BASE}\n[ablate]\nvalues = [4]\nseeds = 2\n"));
    let out = tmp.path().join("a");
    assert_eq!(code(&dode(&["ablate", "--config", &cfg, "--axis", "scale", "--out", s(&out)])), 0);
    let table = std::fs::read_to_string(out.join("ablation_scale.csv")).unwrap();
    assert_eq!(table.lines().count(), 2);
    assert!(std::fs::read_to_string(out.join("resolved_config.toml")).unwrap().contains("axis = \"scale\""));
    assert_eq!(code(&dode(&["ablate", "--config", &cfg, "--axis", "temperature", "--out", s(&out)])), 2);
    assert_eq!(code(&dode(&["ablate", "--config", &cfg, "--out", s(&out)])), 2);
}

#[test]
fn analyze_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "e.toml", BASE);
    let run = tmp.path().join("run");
    assert_eq!(code(&dode(&["sample", "--config", &cfg, "--out", s(&run)])), 0);
    let o = dode(&["analyze", "--trajectory", s(&run.join("trajectory.csv"))]);
    assert_eq!(code(&o), 0);
    let cos = load_matrix_csv(&run.join("cosine.csv")).unwrap();
    assert_eq!(cos.dim(), (3, 3));
    for i in 0..3 {
        for j in 0..3 {
            assert!((cos[[i, j]] - cos[[j, i]]).abs() <= 1e-12);
        }
    }
    assert_eq!(load_matrix_csv(&run.join("norm.csv")).unwrap().nrows(), 4);
    let only = tmp.path().join("only");
    let o = dode(&["analyze", "--trajectory", s(&run.join("trajectory.bin")), "--which", "coords", "--sample", "5", "--coords", "1,0", "--out", s(&only)]);
    assert_eq!(code(&o), 0);
    assert!(only.join("coords.csv").is_file() && !only.join("cosine.csv").exists());

    assert_eq!(code(&dode(&["analyze", "--trajectory", s(&tmp.path().join("missing.csv"))])), 2);
    let bad = dode(&["analyze", "--trajectory", s(&run.join("trajectory.csv")), "--which", "coords", "--sample", "999", "--out", s(&only)]);
    assert_eq!(code(&bad), 2);
    assert_eq!(code(&dode(&["analyze", "--trajectory", s(&run.join("trajectory.csv")), "--which", "heat"])), 2);
}

#[test]
fn thread_cap_is_validated() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "e.toml", BASE);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&dode_env(&["sample", "--config", &cfg, "--out", s(&a)], "DODE_THREADS", "1")), 0);
    assert_eq!(code(&dode_env(&["sample", "--config", &cfg, "--out", s(&b)], "DODE_THREADS", "3")), 0);
    assert_eq!(std::fs::read(a.join("endpoints.csv")).unwrap(), std::fs::read(b.join("endpoints.csv")).unwrap());
    assert_eq!(code(&dode_env(&["sample", "--config", &cfg, "--out", s(&a)], "DODE_THREADS", "zero")), 2);
}

#[test]
fn numerical_blow_up_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let text = BASE.replace("kind = \"gmm-ring\"", "kind = \"gaussian\"\nmean = [1e308, 0.0]\nstd = 1e300");
    let cfg = write_config(tmp.path(), "e.toml", &text);
    let o = dode(&["sample", "--config", &cfg, "--out", s(&tmp.path().join("x"))]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
}
