//! Sensitivity of a response function of the optimal control to the observations.
//!
//! At an optimum `grad J(c*, y) = 0`; differentiating in `y` gives `dc*/dy = H^{-1} M^T W`, with
//! `M` the tangent observation map and `W` the observation time weights. For a response `G` with
//! reduced gradient `F`, `dG/dy = W M nu` where `H nu = F`. We report the density `M nu`
//! (one value per station and sampled level), so a perturbation `dy` changes `G` by
//! `sum_k w_k sum_j (dG/dm)_jk dy_jk`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::adjoint::{solve_forced_foa, SignConvention};
use crate::assimilate::{descend_from, quasi_newton_from, AssimilationProblem, DescentOptions, Linearization};
use crate::domain::{
    inner_l2_space_unchecked, observe, Control, ControlKind, Field, Grid, ObsArray, StateTrajectory, Stencil,
};
use crate::error::{Error, Result};
use crate::hessian::{random_direction, solve_hnu_f, HessianOperator};
use crate::solver::{solve_forward, solve_tangent};

/// Partial derivatives of a response, as densities: for perturbations `(eta', u', c')`,
/// `dG = sum_k w_k <d_eta[k], eta'_k> + sum_k w_k <d_u[k], u'_k> + <d_control, c'>`
/// with trapezoid time weights `w_k` and L² space inner products.
#[derive(Debug, Clone, PartialEq)]
pub struct Partials {
    pub d_eta: Vec<Field>,
    pub d_u: Vec<Field>,
    pub d_control: Field,
}

impl Partials {
    pub fn zeros(grid: &Grid) -> Self {
        Self {
            d_eta: vec![grid.zeros(); grid.n_levels()],
            d_u: vec![grid.zeros(); grid.n_levels()],
            d_control: grid.zeros(),
        }
    }

    fn add_scaled(&mut self, alpha: f64, other: &Partials) {
        for (a, b) in self.d_eta.iter_mut().zip(&other.d_eta).chain(self.d_u.iter_mut().zip(&other.d_u)) {
            a.axpy(alpha, b);
        }
        self.d_control.axpy(alpha, &other.d_control);
    }

    fn is_state_free(&self) -> bool {
        self.d_eta.iter().chain(&self.d_u).all(|f| f.iter().all(|&v| v == 0.0))
    }
}

/// Scalar functional `G(eta, u, c)` of the model trajectory and the control.
pub trait Response: Send + Sync {
    fn name(&self) -> String;
    fn evaluate(&self, traj: &StateTrajectory, control: &Control) -> Result<f64>;
    fn partials(&self, traj: &StateTrajectory, control: &Control) -> Result<Partials>;
}

/// `G = 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroResponse;

impl Response for ZeroResponse {
    fn name(&self) -> String {
        "zero".into()
    }
    fn evaluate(&self, _: &StateTrajectory, _: &Control) -> Result<f64> {
        Ok(0.0)
    }
    fn partials(&self, traj: &StateTrajectory, _: &Control) -> Result<Partials> {
        Ok(Partials::zeros(traj.grid()))
    }
}

/// `G = 1/2 ||c - c_true||²`.
#[derive(Debug, Clone)]
pub struct ControlError {
    pub truth: Field,
}

impl Response for ControlError {
    fn name(&self) -> String {
        "control_error".into()
    }
    fn evaluate(&self, traj: &StateTrajectory, control: &Control) -> Result<f64> {
        let grid = traj.grid();
        grid.check_field(&self.truth, "reference control")?;
        Ok(0.5 * control.field.add_scaled(-1.0, &self.truth).norm_l2(grid).powi(2))
    }
    fn partials(&self, traj: &StateTrajectory, control: &Control) -> Result<Partials> {
        let grid = traj.grid();
        grid.check_field(&self.truth, "reference control")?;
        let mut p = Partials::zeros(grid);
        p.d_control = control.field.add_scaled(-1.0, &self.truth);
        Ok(p)
    }
}

/// `G = eta(x0, t_level)`; the level defaults to the final one.
#[derive(Debug, Clone, Copy)]
pub struct PointHeight {
    pub x0: f64,
    pub level: Option<usize>,
}

impl PointHeight {
    pub fn terminal(x0: f64) -> Self {
        Self { x0, level: None }
    }

    fn resolve(&self, grid: &Grid) -> Result<(Stencil, usize)> {
        let level = self.level.unwrap_or(grid.n_steps());
        if level > grid.n_steps() {
            return Err(Error::Domain(format!("response level {level} is beyond the horizon")));
        }
        Ok((Stencil::at(grid, self.x0)?, level))
    }
}

impl Response for PointHeight {
    fn name(&self) -> String {
        "point_height".into()
    }
    fn evaluate(&self, traj: &StateTrajectory, _: &Control) -> Result<f64> {
        let (s, k) = self.resolve(traj.grid())?;
        Ok(s.sample(traj.eta(k)))
    }
    fn partials(&self, traj: &StateTrajectory, _: &Control) -> Result<Partials> {
        let grid = traj.grid();
        let (s, k) = self.resolve(grid)?;
        let mut p = Partials::zeros(grid);
        s.scatter(1.0 / (grid.dx() * grid.time_weight(k)), &mut p.d_eta[k]);
        Ok(p)
    }
}

/// `G = 1/2 int (eta² + (1+eta) u²) dx` at the final time.
#[derive(Debug, Clone, Copy, Default)]
pub struct TerminalEnergy;

impl Response for TerminalEnergy {
    fn name(&self) -> String {
        "terminal_energy".into()
    }
    fn evaluate(&self, traj: &StateTrajectory, _: &Control) -> Result<f64> {
        let grid = traj.grid();
        let k = grid.n_steps();
        let (eta, u) = (traj.eta(k), traj.u(k));
        Ok(0.5 * grid.dx() * (0..grid.n_cells()).map(|i| eta[i] * eta[i] + (1.0 + eta[i]) * u[i] * u[i]).sum::<f64>())
    }
    fn partials(&self, traj: &StateTrajectory, _: &Control) -> Result<Partials> {
        let grid = traj.grid();
        let k = grid.n_steps();
        let w = grid.time_weight(k);
        let (eta, u) = (traj.eta(k), traj.u(k));
        let mut p = Partials::zeros(grid);
        for i in 0..grid.n_cells() {
            p.d_eta[k][i] = (eta[i] + 0.5 * u[i] * u[i]) / w;
            p.d_u[k][i] = (1.0 + eta[i]) * u[i] / w;
        }
        Ok(p)
    }
}

/// `G = sum_i a_i G_i`.
pub struct Combination {
    pub terms: Vec<(f64, Box<dyn Response>)>,
}

impl Response for Combination {
    fn name(&self) -> String {
        let parts: Vec<String> = self.terms.iter().map(|(a, r)| format!("{a}*{}", r.name())).collect();
        parts.join(" + ")
    }
    fn evaluate(&self, traj: &StateTrajectory, control: &Control) -> Result<f64> {
        self.terms.iter().map(|(a, r)| Ok(a * r.evaluate(traj, control)?)).sum()
    }
    fn partials(&self, traj: &StateTrajectory, control: &Control) -> Result<Partials> {
        let mut out = Partials::zeros(traj.grid());
        for (a, r) in &self.terms {
            out.add_scaled(*a, &r.partials(traj, control)?);
        }
        Ok(out)
    }
}

/// The built-in responses by name, for configuration files.
pub fn builtin_response(name: &str, truth: &Field, x0: f64) -> Result<Box<dyn Response>> {
    match name {
        "zero" => Ok(Box::new(ZeroResponse)),
        "control_error" => Ok(Box::new(ControlError { truth: truth.clone() })),
        "point_height" => Ok(Box::new(PointHeight::terminal(x0))),
        "terminal_energy" => Ok(Box::new(TerminalEnergy)),
        other => Err(Error::Config(format!(
            "unknown response '{other}' (expected zero, control_error, point_height or terminal_energy)"
        ))),
    }
}

/// Relative mismatch between the supplied partials and a central difference of `evaluate`
/// along a random perturbation of the trajectory and the control.
pub fn fd_self_check(rf: &dyn Response, traj: &StateTrajectory, control: &Control, rng_seed: u64) -> Result<f64> {
    let grid = traj.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let n = grid.n_cells() * grid.n_levels();
    let d_eta: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let d_u: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let d_c = random_direction(grid, &mut rng, 6);
    let shifted = |s: f64| -> Result<f64> {
        let eta = traj.eta_all().iter().zip(&d_eta).map(|(a, b)| a + s * b).collect();
        let u = traj.u_all().iter().zip(&d_u).map(|(a, b)| a + s * b).collect();
        let t = StateTrajectory::from_rows(grid, eta, u)?;
        let c = Control { kind: control.kind, field: control.field.add_scaled(s, &d_c) };
        rf.evaluate(&t, &c)
    };
    let eps = 1e-6;
    let fd = (shifted(eps)? - shifted(-eps)?) / (2.0 * eps);
    let p = rf.partials(traj, control)?;
    let (nc, dx) = (grid.n_cells(), grid.dx());
    let mut lin = inner_l2_space_unchecked(&p.d_control, &d_c, dx);
    for k in 0..grid.n_levels() {
        let w = grid.time_weight(k);
        lin += w * inner_l2_space_unchecked(&p.d_eta[k], &d_eta[k * nc..(k + 1) * nc], dx);
        lin += w * inner_l2_space_unchecked(&p.d_u[k], &d_u[k * nc..(k + 1) * nc], dx);
    }
    let scale = fd.abs().max(lin.abs());
    Ok(if scale > 0.0 { (fd - lin).abs() / scale } else { 0.0 })
}

/// Reduced gradient of `G` with respect to the control at `c`:
/// `dG/dphi + psi(x, 0)` (IC) or `dG/dbeta - int u d(gamma)/dx dt` (bathymetry).
pub fn assemble_f(
    problem: &AssimilationProblem,
    base: &StateTrajectory,
    control: &Control,
    rf: &dyn Response,
    convention: SignConvention,
) -> Result<Field> {
    problem.check_control(control)?;
    let partials = rf.partials(base, control)?;
    let mut f = partials.d_control.clone();
    if partials.is_state_free() {
        return Ok(f);
    }
    let beta = problem.fields(control).1;
    let forced = solve_forced_foa(base, &beta, &partials.d_eta, &partials.d_u, problem.kind, convention)?;
    match problem.kind {
        ControlKind::InitialCondition => f.axpy(1.0, &forced.eta_initial()),
        ControlKind::Bathymetry => f.axpy(-1.0, forced.u_deta_dx_integral()),
    }
    Ok(f)
}

/// [`assemble_f`] for an initial-condition control `phi` over a flat bottom.
pub fn assemble_f_ic(base: &StateTrajectory, phi: &Field, rf: &dyn Response, convention: SignConvention) -> Result<Field> {
    let grid = base.grid();
    let control = Control::initial_condition(phi.clone());
    let partials = rf.partials(base, &control)?;
    let forced = solve_forced_foa(base, &grid.zeros(), &partials.d_eta, &partials.d_u, ControlKind::InitialCondition, convention)?;
    Ok(partials.d_control.add_scaled(1.0, &forced.eta_initial()))
}

/// [`assemble_f`] for a bathymetry control `beta`.
pub fn assemble_f_bathy(base: &StateTrajectory, beta: &Field, rf: &dyn Response, convention: SignConvention) -> Result<Field> {
    let control = Control::bathymetry(beta.clone());
    let partials = rf.partials(base, &control)?;
    let forced = solve_forced_foa(base, beta, &partials.d_eta, &partials.d_u, ControlKind::Bathymetry, convention)?;
    Ok(partials.d_control.add_scaled(-1.0, forced.u_deta_dx_integral()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SensitivityOptions {
    /// CG stopping rule `||H nu - F|| <= rel_tol ||F||`.
    pub rel_tol: f64,
    pub max_iter: usize,
    /// Shift `mu` in `(H + mu I) nu = F`.
    pub tikhonov: f64,
    pub sign_convention: SignConvention,
    /// Required `||grad J(c)|| / ||grad J(first guess)||` at the linearization point.
    pub optimality_tol: f64,
}

impl Default for SensitivityOptions {
    fn default() -> Self {
        Self { rel_tol: 1e-8, max_iter: 500, tikhonov: 0.0, sign_convention: SignConvention::Consistent, optimality_tol: 1e-6 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SensitivityResult {
    pub response: String,
    pub kind: ControlKind,
    /// `dG/dm` per station (rows) and sampled level (columns).
    pub dg_dm: ObsArray,
    pub nu: Field,
    pub f: Field,
    pub cg_iterations: usize,
    pub cg_residual: f64,
    pub cg_history: Vec<f64>,
    /// SHA-256 of the linearization point.
    pub linearization_hash: String,
    pub config_hash: Option<String>,
}

/// SHA-256 over the little-endian bytes of a field.
pub fn field_hash(f: &Field) -> String {
    let mut h = Sha256::new();
    for v in f.iter() {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Four-step sensitivity procedure at an optimum `optimum` of `problem`:
/// assemble `F`, solve `H nu = F`, run the tangent model driven by `nu`, sample it at the stations.
pub fn sensitivity(
    problem: &AssimilationProblem,
    optimum: &Control,
    rf: &dyn Response,
    opts: &SensitivityOptions,
) -> Result<SensitivityResult> {
    let op = HessianOperator::new(problem.clone(), optimum)?.with_tikhonov(opts.tikhonov)?;
    let lin = op.linearization();
    let grid = &problem.grid;
    let reference = Linearization::at(problem, &problem.first_guess)?.gradient.norm_l2(grid);
    let gnorm = lin.gradient.norm_l2(grid);
    if gnorm > opts.optimality_tol * reference {
        return Err(Error::Precondition(format!(
            "control is not optimal: |grad J| = {gnorm:.3e} exceeds {:.1e} x |grad J(first guess)| = {:.3e}",
            opts.optimality_tol,
            opts.optimality_tol * reference
        )));
    }
    let f = assemble_f(problem, &lin.forward, optimum, rf, opts.sign_convention)?;
    let cg = solve_hnu_f(&op, &f, opts.rel_tol, opts.max_iter)?;
    let p3 = match problem.kind {
        ControlKind::InitialCondition => solve_tangent(&lin.forward, &lin.beta, &cg.nu, None)?,
        ControlKind::Bathymetry => solve_tangent(&lin.forward, &lin.beta, &grid.zeros(), Some(&cg.nu))?,
    };
    let dg_dm = observe(&p3, problem.layout())?;
    Ok(SensitivityResult {
        response: rf.name(),
        kind: problem.kind,
        dg_dm,
        nu: cg.nu,
        f,
        cg_iterations: cg.iterations,
        cg_residual: cg.residual_history.last().copied().unwrap_or(0.0),
        cg_history: cg.residual_history,
        linearization_hash: field_hash(&optimum.field),
        config_hash: None,
    })
}

pub fn sensitivity_ic(
    problem: &AssimilationProblem,
    optimum: &Control,
    rf: &dyn Response,
    opts: &SensitivityOptions,
) -> Result<SensitivityResult> {
    if problem.kind != ControlKind::InitialCondition {
        return Err(Error::Domain("sensitivity_ic needs an initial-condition problem".into()));
    }
    sensitivity(problem, optimum, rf, opts)
}

pub fn sensitivity_bathy(
    problem: &AssimilationProblem,
    optimum: &Control,
    rf: &dyn Response,
    opts: &SensitivityOptions,
) -> Result<SensitivityResult> {
    if problem.kind != ControlKind::Bathymetry {
        return Err(Error::Domain("sensitivity_bathy needs a bathymetry problem".into()));
    }
    sensitivity(problem, optimum, rf, opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(default)]
pub struct OracleOptions {
    pub delta: f64,
    /// Re-optimisation stops at `||grad J|| <= rel_tol ||grad J(first guess)||`.
    pub rel_tol: f64,
    pub max_iters: usize,
    /// L-BFGS memory of the re-optimisation; 0 uses steepest descent.
    pub memory: usize,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self { delta: 1e-3, rel_tol: 1e-10, max_iters: 5000, memory: 30 }
    }
}

impl OracleOptions {
    /// Defaults with a perturbation size suited to the control kind. The IC map is close to
    /// linear, so a larger `delta` keeps the O(delta^2) term above the re-optimisation noise;
    /// the bathymetry map is strongly nonlinear and needs a small one.
    pub fn for_kind(kind: ControlKind) -> Self {
        let delta = match kind {
            ControlKind::InitialCondition => 1e-2,
            ControlKind::Bathymetry => 5e-4,
        };
        Self { delta, ..Self::default() }
    }
}

/// Brute-force `dG/dm`: perturb each observation by `±delta`, re-optimise from `optimum`,
/// evaluate `G` at the new optimum and divide the central difference by the sample's time weight.
pub fn oracle_sensitivity(
    problem: &AssimilationProblem,
    optimum: &Control,
    rf: &dyn Response,
    opts: &OracleOptions,
) -> Result<ObsArray> {
    if !(opts.delta > 0.0 && opts.delta.is_finite()) {
        return Err(Error::Domain(format!("oracle delta must be positive, got {}", opts.delta)));
    }
    let layout = problem.layout();
    let (n_obs, n_times) = (layout.n_obs(), layout.n_times());
    let reference = Linearization::at(problem, &problem.first_guess)?.gradient.norm_l2(&problem.grid);
    let descent = DescentOptions { max_iters: opts.max_iters, tol: Some(opts.rel_tol * reference), ..Default::default() };
    let samples: Vec<(usize, usize, f64)> =
        (0..n_obs).flat_map(|j| (0..n_times).flat_map(move |t| [(j, t, 1.0), (j, t, -1.0)])).collect();
    let values = samples
        .par_iter()
        .map(|&(j, t, sign)| {
            let wrap = |e: Error| Error::Oracle { station: j, time: t, source: Box::new(e) };
            let mut heights = problem.observations.heights.clone();
            heights.set(j, t, heights.get(j, t) + sign * opts.delta);
            let perturbed = problem.with_heights(heights).map_err(wrap)?;
            let report = match opts.memory {
                0 => descend_from(&perturbed, optimum, &descent),
                m => quasi_newton_from(&perturbed, optimum, &descent, m),
            }
            .map_err(wrap)?;
            if !report.converged {
                return Err(wrap(Error::Precondition(format!(
                    "re-optimisation stopped at |grad J| = {:.3e} after {} iterations",
                    report.final_grad_norm(),
                    report.iterates.len() - 1
                ))));
            }
            let traj = solve_forward(&perturbed.forward_problem(&report.control).map_err(wrap)?).map_err(wrap)?;
            rf.evaluate(&traj, &report.control).map_err(wrap)
        })
        .collect::<Result<Vec<f64>>>()?;
    let weights = layout.time_weights();
    let mut out = ObsArray::zeros(n_obs, n_times);
    for j in 0..n_obs {
        for t in 0..n_times {
            let i = 2 * (j * n_times + t);
            out.set(j, t, (values[i] - values[i + 1]) / (2.0 * opts.delta * weights[t]));
        }
    }
    Ok(out)
}

/// Relative L² (Frobenius) distance `||a - b|| / ||b||`.
pub fn relative_discrepancy(a: &ObsArray, b: &ObsArray) -> f64 {
    let diff = a.zip_map(b, |x, y| x - y).euclidean_norm();
    let scale = b.euclidean_norm();
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

/// Oracle errors against a reference at `delta` and `delta / 2`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RichardsonCheck {
    pub delta: f64,
    pub error_full: f64,
    pub error_half: f64,
    /// `error_full / error_half`; close to 4 for a second-order oracle.
    pub ratio: f64,
}

pub fn richardson_check(
    problem: &AssimilationProblem,
    optimum: &Control,
    rf: &dyn Response,
    reference: &ObsArray,
    opts: &OracleOptions,
) -> Result<RichardsonCheck> {
    let full = oracle_sensitivity(problem, optimum, rf, opts)?;
    let half = oracle_sensitivity(problem, optimum, rf, &OracleOptions { delta: 0.5 * opts.delta, ..*opts })?;
    let error_full = relative_discrepancy(&full, reference);
    let error_half = relative_discrepancy(&half, reference);
    Ok(RichardsonCheck { delta: opts.delta, error_full, error_half, ratio: error_full / error_half })
}
