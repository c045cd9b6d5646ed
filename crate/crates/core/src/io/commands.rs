use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use super::config::RunConfig;
use super::manifest::{sha256_hex, unix_now, RunManifest, MANIFEST_FILE};
use super::table::{Cell, Table};
use crate::assimilate::{
    cost, descend_with, gradient, kappa_first_order, make_twin_with_layout, AssimilationProblem, DescentReport,
};
use crate::domain::{inner_l2_space, Control, ControlKind, Field};
use crate::error::{Error, Result};
use crate::hessian::{kappa_second_order, random_direction, symmetry_check, HessianOperator};
use crate::sensitivity::{builtin_response, oracle_sensitivity, relative_discrepancy, sensitivity};
use crate::solver::{mass, solve_forward, ForwardProblem};

/// One command-line run: the parsed config, its raw bytes and where outputs go.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub config: RunConfig,
    pub config_bytes: Vec<u8>,
    pub out_dir: PathBuf,
    pub kind: ControlKind,
    pub oracle: bool,
}

impl Invocation {
    /// Uses the config's own output directory and kind; the hashed bytes are its TOML rendering.
    pub fn from_config(config: RunConfig) -> Result<Self> {
        let config_bytes = config.to_toml()?.into_bytes();
        Ok(Self {
            out_dir: config.output.directory.clone(),
            kind: config.kind,
            config,
            config_bytes,
            oracle: false,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (config, config_bytes) = RunConfig::load(path)?;
        Ok(Self { out_dir: config.output.directory.clone(), kind: config.kind, config, config_bytes, oracle: false })
    }
}

struct Run<'a> {
    inv: &'a Invocation,
    command: &'static str,
    kind: Option<ControlKind>,
    started: f64,
    stages: Vec<(String, f64)>,
    summary: BTreeMap<String, Value>,
    files: Vec<String>,
}

impl<'a> Run<'a> {
    fn start(inv: &'a Invocation, command: &'static str, kind: Option<ControlKind>) -> Result<Self> {
        std::fs::create_dir_all(&inv.out_dir)?;
        log::info!("{command}: writing to {}", inv.out_dir.display());
        Ok(Self { inv, command, kind, started: unix_now(), stages: Vec::new(), summary: BTreeMap::new(), files: Vec::new() })
    }

    fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f();
        let secs = t.elapsed().as_secs_f64();
        log::info!("{}: stage {name} took {secs:.3} s", self.command);
        self.stages.push((name.to_string(), secs));
        out
    }

    fn table(&mut self, name: &str, table: &Table) -> Result<()> {
        table.write(&self.inv.out_dir.join(name))?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn note(&mut self, key: &str, value: Value) {
        self.summary.insert(key.to_string(), value);
    }

    fn finish<T>(self, outcome: Result<T>) -> Result<RunManifest> {
        let (status, exit_code) = match &outcome {
            Ok(_) => ("ok".to_string(), 0),
            Err(e) => (e.to_string(), e.exit_code()),
        };
        let manifest = RunManifest {
            command: self.command.to_string(),
            kind: self.kind,
            config_sha256: sha256_hex(&self.inv.config_bytes),
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: self.started,
            finished_unix: unix_now(),
            stages: self.stages,
            summary: self.summary,
            files: self.files,
            status,
            exit_code,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(self.inv.out_dir.join(MANIFEST_FILE), text + "\n")?;
        outcome.map(|_| manifest)
    }
}

fn twin(inv: &Invocation) -> Result<(AssimilationProblem, Field)> {
    let cfg = &inv.config;
    let grid = cfg.grid()?;
    let (truth, counterpart) = cfg.truth_fields(&grid, inv.kind)?;
    let layout = cfg.observation.layout(&grid)?;
    let p = make_twin_with_layout(
        &grid,
        &Control { kind: inv.kind, field: truth.clone() },
        &counterpart,
        layout,
        cfg.observation.noise_sd,
        cfg.observation.seed,
    )?;
    Ok((p, truth))
}

fn descent_table(report: &DescentReport) -> Table {
    let mut t = Table::new(&["iteration", "cost", "grad_norm", "step"]);
    for it in &report.iterates {
        t.push(vec![it.iteration.into(), it.cost.into(), it.grad_norm.into(), it.step.into()]);
    }
    t
}

/// Truth trajectory: snapshots of `(x, eta, u)` and the mass diagnostic at every level.
pub fn cmd_forward(inv: &Invocation) -> Result<RunManifest> {
    let mut run = Run::start(inv, "forward", None)?;
    let outcome = forward_body(inv, &mut run);
    run.finish(outcome)
}

fn forward_body(inv: &Invocation, run: &mut Run) -> Result<()> {
    let cfg = &inv.config;
    let grid = cfg.grid()?;
    let phi = cfg.truth.initial.build(&grid)?;
    let beta = cfg.truth.bathymetry.build(&grid)?;
    let traj = run.stage("forward", || solve_forward(&ForwardProblem::new(grid.clone(), phi, beta)?))?;

    let every = cfg.output.snapshot_every;
    let mut levels: Vec<usize> =
        if every == 0 { vec![0, grid.n_steps()] } else { (0..=grid.n_steps()).step_by(every).collect() };
    if levels.last() != Some(&grid.n_steps()) {
        levels.push(grid.n_steps());
    }
    levels.dedup();
    let mut snaps = Table::new(&["level", "time", "x", "eta", "u"]);
    for &k in &levels {
        for (i, x) in grid.xs().into_iter().enumerate() {
            snaps.push(vec![k.into(), grid.time(k).into(), x.into(), traj.eta(k)[i].into(), traj.u(k)[i].into()]);
        }
    }
    run.table("snapshots.csv", &snaps)?;

    let m0 = mass(&traj, 0)?;
    let mut masses = Table::new(&["level", "time", "mass", "drift"]);
    let mut drift = 0.0_f64;
    for k in 0..grid.n_levels() {
        let m = mass(&traj, k)?;
        drift = drift.max((m - m0).abs());
        masses.push(vec![k.into(), grid.time(k).into(), m.into(), (m - m0).into()]);
    }
    run.table("mass.csv", &masses)?;
    run.note("max_mass_drift", json!(drift));
    run.note("max_abs_eta", json!(traj.eta_all().iter().fold(0.0_f64, |m, v| m.max(v.abs()))));
    Ok(())
}

/// Twin experiment: descent from the zero first guess towards the configured truth.
pub fn cmd_assimilate(inv: &Invocation) -> Result<RunManifest> {
    let mut run = Run::start(inv, "assimilate", Some(inv.kind))?;
    let outcome = assimilate_body(inv, &mut run);
    run.finish(outcome)
}

fn assimilate_body(inv: &Invocation, run: &mut Run) -> Result<()> {
    let (p, truth) = run.stage("twin", || twin(inv))?;
    let grid = p.grid.clone();
    let report = match run.stage("descend", || descend_with(&p, &inv.config.optimizer)) {
        Ok(r) => r,
        Err(Error::Stall { iteration, halvings, report }) => {
            run.table("descent.csv", &descent_table(&report))?;
            return Err(Error::Stall { iteration, halvings, report });
        }
        Err(e) => return Err(e),
    };
    run.table("descent.csv", &descent_table(&report))?;
    let mut t = Table::new(&["x", "estimate", "truth", "first_guess"]);
    for (i, x) in grid.xs().into_iter().enumerate() {
        t.push(vec![x.into(), report.control.field[i].into(), truth[i].into(), p.first_guess.field[i].into()]);
    }
    run.table("control.csv", &t)?;
    let e0 = p.first_guess.field.add_scaled(-1.0, &truth).norm_l2(&grid);
    let e1 = report.control.field.add_scaled(-1.0, &truth).norm_l2(&grid);
    run.note("iterations", json!(report.iterates.len() - 1));
    run.note("converged", json!(report.converged));
    run.note("final_cost", json!(report.final_cost()));
    run.note("final_grad_norm", json!(report.final_grad_norm()));
    run.note("initial_error_l2", json!(e0));
    run.note("final_error_l2", json!(e1));
    run.note("error_reduction", json!(if e1 > 0.0 { e0 / e1 } else { f64::INFINITY }));
    Ok(())
}

fn check_directions(inv: &Invocation, p: &AssimilationProblem, count: usize, salt: u64) -> Vec<Field> {
    let mut rng = ChaCha8Rng::seed_from_u64(inv.config.kappa.seed ^ salt);
    (0..count).map(|_| random_direction(&p.grid, &mut rng, 8).scaled(inv.config.kappa.direction_scale)).collect()
}

/// First- and second-order kappa sweeps at the first guess.
pub fn cmd_kappa(inv: &Invocation) -> Result<RunManifest> {
    let mut run = Run::start(inv, "kappa", Some(inv.kind))?;
    let outcome = kappa_body(inv, &mut run);
    run.finish(outcome)
}

fn kappa_body(inv: &Invocation, run: &mut Run) -> Result<()> {
    let (p, _) = run.stage("twin", || twin(inv))?;
    let eps = inv.config.kappa.epsilons()?;
    let dirs = check_directions(inv, &p, 2, 0);
    let c = p.first_guess.clone();
    let k1 = run.stage("kappa_first_order", || kappa_first_order(&p, &c, &dirs[0], &eps))?;
    let op = HessianOperator::new(p.clone(), &c)?;
    let k2 = run.stage("kappa_second_order", || kappa_second_order(&op, &dirs[0], &dirs[1], &eps))?;
    let mut t = Table::new(&["epsilon", "kappa_first_order", "kappa_second_order"]);
    for ((e, a), (_, b)) in k1.iter().zip(&k2) {
        t.push(vec![(*e).into(), (*a).into(), (*b).into()]);
    }
    run.table("kappa.csv", &t)?;
    let best = |k: &[(f64, f64)]| k.iter().map(|(_, v)| (v - 1.0).abs()).fold(f64::INFINITY, f64::min);
    run.note("best_first_order_deviation", json!(best(&k1)));
    run.note("best_second_order_deviation", json!(best(&k2)));
    Ok(())
}

/// Gradient and Hessian-vector products against finite differences, plus Hessian symmetry.
pub fn cmd_hvp_check(inv: &Invocation) -> Result<RunManifest> {
    let mut run = Run::start(inv, "hvp-check", Some(inv.kind))?;
    let outcome = hvp_body(inv, &mut run);
    run.finish(outcome)
}

fn hvp_body(inv: &Invocation, run: &mut Run) -> Result<()> {
    let (p, _) = run.stage("twin", || twin(inv))?;
    let grid = p.grid.clone();
    let c = p.first_guess.clone();
    let n = inv.config.kappa.checks.max(1);
    let dirs = check_directions(inv, &p, n, 0x5eed);
    let shifted = |d: &Field, s: f64| Control { kind: c.kind, field: c.field.add_scaled(s, d) };

    let g = gradient(&p, &c)?;
    let mut gt = Table::new(&["direction", "adjoint", "finite_difference", "rel_error"]);
    let mut worst_grad = 0.0_f64;
    run.stage("gradient_check", || -> Result<()> {
        let eps = 1e-5;
        for (i, d) in dirs.iter().enumerate() {
            let ad = inner_l2_space(&g, d, &grid)?;
            let fd = (cost(&p, &shifted(d, eps))? - cost(&p, &shifted(d, -eps))?) / (2.0 * eps);
            let rel = (ad - fd).abs() / fd.abs().max(f64::MIN_POSITIVE);
            worst_grad = worst_grad.max(rel);
            gt.push(vec![i.into(), ad.into(), fd.into(), rel.into()]);
        }
        Ok(())
    })?;
    run.table("gradient_check.csv", &gt)?;

    let op = HessianOperator::new(p.clone(), &c)?;
    let mut ht = Table::new(&["direction", "hvp_norm", "fd_norm", "rel_error"]);
    let mut worst_hvp = 0.0_f64;
    run.stage("hvp_check", || -> Result<()> {
        let eps = 1e-4;
        for (i, d) in dirs.iter().enumerate() {
            let h = op.hvp(d)?;
            let fd = gradient(&p, &shifted(d, eps))?.add_scaled(-1.0, &gradient(&p, &shifted(d, -eps))?).scaled(0.5 / eps);
            let fd_norm = fd.norm_l2(&grid);
            let rel = h.add_scaled(-1.0, &fd).norm_l2(&grid) / fd_norm.max(f64::MIN_POSITIVE);
            worst_hvp = worst_hvp.max(rel);
            ht.push(vec![i.into(), h.norm_l2(&grid).into(), fd_norm.into(), rel.into()]);
        }
        Ok(())
    })?;
    run.table("hvp_check.csv", &ht)?;
    let asym = run.stage("symmetry", || symmetry_check(&op, 10, inv.config.kappa.seed))?;
    run.note("max_gradient_rel_error", json!(worst_grad));
    run.note("max_hvp_rel_error", json!(worst_hvp));
    run.note("max_asymmetry", json!(asym));
    Ok(())
}

/// Full observation-sensitivity pipeline, with the brute-force comparison when `inv.oracle` is set.
pub fn cmd_sensitivity(inv: &Invocation) -> Result<RunManifest> {
    let mut run = Run::start(inv, "sensitivity", Some(inv.kind))?;
    let outcome = sensitivity_body(inv, &mut run);
    run.finish(outcome)
}

fn sensitivity_body(inv: &Invocation, run: &mut Run) -> Result<()> {
    let cfg = &inv.config;
    let sc = &cfg.sensitivity;
    let (p, truth) = run.stage("twin", || twin(inv))?;
    let grid = p.grid.clone();
    let report = run.stage("optimum", || descend_with(&p, &sc.optimum_descent(&cfg.optimizer)))?;
    run.table("descent.csv", &descent_table(&report))?;
    let rf = builtin_response(&sc.response, &truth, sc.x0)?;
    let opts = sc.options();
    let mut result = run.stage("adjoint_sensitivity", || sensitivity(&p, &report.control, rf.as_ref(), &opts))?;
    result.config_hash = Some(sha256_hex(&inv.config_bytes));

    let layout = p.layout();
    let mut t = Table::new(&["station", "position", "time_index", "level", "time", "dg_dm"]);
    for (j, &x) in layout.positions().iter().enumerate() {
        for (ti, &k) in layout.levels().iter().enumerate() {
            t.push(vec![j.into(), x.into(), ti.into(), k.into(), grid.time(k).into(), result.dg_dm.get(j, ti).into()]);
        }
    }
    run.table("dg_dm.csv", &t)?;
    let mut t = Table::new(&["x", "nu", "f"]);
    for (i, x) in grid.xs().into_iter().enumerate() {
        t.push(vec![x.into(), result.nu[i].into(), result.f[i].into()]);
    }
    run.table("nu.csv", &t)?;
    let mut t = Table::new(&["iteration", "relative_residual"]);
    for (i, r) in result.cg_history.iter().enumerate() {
        t.push(vec![Cell::from(i), (*r).into()]);
    }
    run.table("cg_residuals.csv", &t)?;
    run.note("response", json!(result.response));
    run.note("optimum_iterations", json!(report.iterates.len() - 1));
    run.note("optimum_grad_norm", json!(report.final_grad_norm()));
    run.note("cg_iterations", json!(result.cg_iterations));
    run.note("cg_residual", json!(result.cg_residual));
    run.note("cg_rel_tol", json!(opts.rel_tol));
    run.note("linearization_sha256", json!(result.linearization_hash));
    run.note("max_abs_dg_dm", json!(result.dg_dm.max_abs()));

    if inv.oracle {
        let oo = sc.oracle(p.kind);
        let oracle = run.stage("oracle", || oracle_sensitivity(&p, &report.control, rf.as_ref(), &oo))?;
        let mut t = Table::new(&["station", "time_index", "adjoint", "oracle", "abs_diff"]);
        for j in 0..layout.n_obs() {
            for ti in 0..layout.n_times() {
                let (a, o) = (result.dg_dm.get(j, ti), oracle.get(j, ti));
                t.push(vec![j.into(), ti.into(), a.into(), o.into(), (a - o).abs().into()]);
            }
        }
        run.table("oracle.csv", &t)?;
        run.note("oracle_delta", json!(oo.delta));
        run.note("oracle_relative_discrepancy", json!(relative_discrepancy(&result.dg_dm, &oracle)));
    }
    Ok(())
}
