use std::path::Path;
use std::process::Command;

use swe_assim::io::RunManifest;

const CONFIG: &str = r#"
kind = "ic"

[grid]
n_cells = 32
dt = 0.025
n_steps = 48

[truth.initial]
recipe = "gaussian"
amplitude = 0.1
center = 0.0
width = 0.15

[truth.bathymetry]
recipe = "sandbar"
height = 0.1
center = 0.3
width = 0.4

[observation]
stations = [-0.87, -0.56, -0.25, 0.06, 0.37, 0.68]
start = 2
stride = 2
noise_sd = 1e-3
seed = 5

[optimizer]
max_iters = 60

[kappa]
max_exp = -2.0
min_exp = -8.0
checks = 2

[sensitivity]
x0 = 0.4
optimum_rel_tol = 1e-9
"#;

fn run(dir: &Path, args: &[&str]) -> (i32, RunManifest) {
    let cfg = dir.join("run.toml");
    std::fs::write(&cfg, CONFIG).unwrap();
    let out = dir.join("out");
    let status = Command::new(env!("CARGO_BIN_EXE_swe-assim"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    (status.code().unwrap(), RunManifest::read(&out).unwrap())
}

fn header(dir: &Path, file: &str) -> String {
    let text = std::fs::read_to_string(dir.join("out").join(file)).unwrap();
    text.lines().next().unwrap().to_string()
}

#[test]
fn forward_writes_snapshots_and_mass() {
    let dir = tempfile::tempdir().unwrap();
    let (code, m) = run(dir.path(), &["forward"]);
    assert_eq!(code, 0);
    assert_eq!(m.status, "ok");
    assert!(m.matches_config(CONFIG.as_bytes()));
    assert_eq!(m.files, ["snapshots.csv", "mass.csv"]);
    assert_eq!(header(dir.path(), "snapshots.csv"), "level,time,x,eta,u");
    assert!(m.summary["max_mass_drift"].as_f64().unwrap() <= 1e-10);
}

#[test]
fn identical_configs_give_identical_payloads() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run(a.path(), &["assimilate"]);
    run(b.path(), &["assimilate"]);
    for f in ["descent.csv", "control.csv"] {
        let read = |d: &Path| std::fs::read(d.join("out").join(f)).unwrap();
        assert_eq!(read(a.path()), read(b.path()), "{f}");
    }
}

#[test]
fn assimilate_reduces_the_gradient() {
    let dir = tempfile::tempdir().unwrap();
    let (code, m) = run(dir.path(), &["assimilate", "--kind", "bathymetry"]);
    assert_eq!(code, 0, "{}", m.status);
    assert_eq!(m.kind, Some(swe_assim::ControlKind::Bathymetry));
    assert_eq!(header(dir.path(), "descent.csv"), "iteration,cost,grad_norm,step");
    assert_eq!(header(dir.path(), "control.csv"), "x,estimate,truth,first_guess");
    let text = std::fs::read_to_string(dir.path().join("out/descent.csv")).unwrap();
    let grads: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert!(grads.last().unwrap() < &(1e-2 * grads[0]));
}

#[test]
fn kappa_and_hvp_checks_pass() {
    let dir = tempfile::tempdir().unwrap();
    let (code, m) = run(dir.path(), &["kappa"]);
    assert_eq!(code, 0, "{}", m.status);
    assert_eq!(header(dir.path(), "kappa.csv"), "epsilon,kappa_first_order,kappa_second_order");
    assert!(m.summary["best_first_order_deviation"].as_f64().unwrap() < 1e-4);
    assert!(m.summary["best_second_order_deviation"].as_f64().unwrap() < 1e-4);

    let dir = tempfile::tempdir().unwrap();
    let (code, m) = run(dir.path(), &["hvp-check", "--kind", "bathymetry"]);
    assert_eq!(code, 0, "{}", m.status);
    assert!(m.summary["max_gradient_rel_error"].as_f64().unwrap() < 1e-3);
    assert!(m.summary["max_hvp_rel_error"].as_f64().unwrap() < 1e-3);
    assert!(m.summary["max_asymmetry"].as_f64().unwrap() < 1e-3);
}

#[test]
fn sensitivity_writes_its_tables() {
    let dir = tempfile::tempdir().unwrap();
    let (code, m) = run(dir.path(), &["sensitivity", "--threads", "2"]);
    assert_eq!(code, 0, "{}", m.status);
    assert_eq!(header(dir.path(), "dg_dm.csv"), "station,position,time_index,level,time,dg_dm");
    assert_eq!(header(dir.path(), "nu.csv"), "x,nu,f");
    assert_eq!(header(dir.path(), "cg_residuals.csv"), "iteration,relative_residual");
    let rows = std::fs::read_to_string(dir.path().join("out/dg_dm.csv")).unwrap().lines().count();
    assert_eq!(rows, 1 + 6 * 24);
}

#[test]
fn stalled_descent_still_writes_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, CONFIG.replace("max_iters = 60", "max_iters = 60\nmax_halvings = 0\narmijo_c1 = 0.999")).unwrap();
    let out = dir.path().join("out");
    let status = Command::new(env!("CARGO_BIN_EXE_swe-assim"))
        .args(["assimilate", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    let m = RunManifest::read(&out).unwrap();
    assert_eq!(status.code(), Some(4));
    assert_eq!(m.exit_code, 4);
    assert!(m.files.contains(&"descent.csv".to_string()));
}

#[test]
fn bad_config_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[grid]\nn_cells = 4\n").unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_swe-assim")).args(["forward", "--config"]).arg(&cfg).status().unwrap();
    assert_eq!(status.code(), Some(2));
}
