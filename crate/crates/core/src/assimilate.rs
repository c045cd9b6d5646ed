//! Misfit costs, adjoint gradients, steepest descent and twin-experiment construction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::adjoint::{solve_foa, AdjointForcing, AdjointSolution};
use crate::domain::{
    inner_l2_space, inner_obs, observe, Control, ControlKind, Field, Grid, ObsArray, ObservationLayout,
    ObservationSet, StateTrajectory,
};
use crate::error::{Error, Result};
use crate::solver::{solve_forward, ForwardProblem};

/// Reconstruction problem for one control kind; the other field is held fixed.
#[derive(Debug, Clone)]
pub struct AssimilationProblem {
    pub grid: Grid,
    pub kind: ControlKind,
    /// Bathymetry for the IC kind, initial height for the bathymetry kind.
    pub known_counterpart: Field,
    pub observations: ObservationSet,
    pub first_guess: Control,
}

impl AssimilationProblem {
    pub fn new(
        grid: Grid,
        kind: ControlKind,
        known_counterpart: Field,
        observations: ObservationSet,
        first_guess: Control,
    ) -> Result<Self> {
        grid.check_field(&known_counterpart, "known counterpart")?;
        grid.check_field(&first_guess.field, "first guess")?;
        if first_guess.kind != kind {
            return Err(Error::Domain(format!("first guess is a {} control, problem is {kind}", first_guess.kind)));
        }
        let layout = observations.layout.rebind(&grid)?;
        if layout != observations.layout {
            return Err(Error::Alignment("observation layout was built for a different grid".into()));
        }
        if let Some(&k) = layout.levels().last() {
            if k > grid.n_steps() {
                return Err(Error::Alignment(format!("observation level {k} is beyond the horizon")));
            }
        }
        Ok(Self { grid, kind, known_counterpart, observations, first_guess })
    }

    pub fn layout(&self) -> &ObservationLayout {
        &self.observations.layout
    }

    /// Same problem with the measured heights replaced.
    pub fn with_heights(&self, heights: ObsArray) -> Result<Self> {
        let mut p = self.clone();
        p.observations = ObservationSet::new(self.observations.layout.clone(), heights)?;
        Ok(p)
    }

    pub(crate) fn check_control(&self, c: &Control) -> Result<()> {
        if c.kind != self.kind {
            return Err(Error::Domain(format!("{} control passed to a {} problem", c.kind, self.kind)));
        }
        self.grid.check_field(&c.field, "control")
    }

    /// Initial height and bathymetry implied by a control.
    pub fn fields(&self, c: &Control) -> (Field, Field) {
        match self.kind {
            ControlKind::InitialCondition => (c.field.clone(), self.known_counterpart.clone()),
            ControlKind::Bathymetry => (self.known_counterpart.clone(), c.field.clone()),
        }
    }

    pub fn forward_problem(&self, c: &Control) -> Result<ForwardProblem> {
        self.check_control(c)?;
        let (phi, beta) = self.fields(c);
        ForwardProblem::new(self.grid.clone(), phi, beta)
    }

    /// Model-minus-observation residual `H eta - y`.
    pub fn misfit(&self, traj: &StateTrajectory) -> Result<ObsArray> {
        let model = observe(traj, self.layout())?;
        Ok(model.zip_map(&self.observations.heights, |m, y| m - y))
    }

    pub(crate) fn cost_of_misfit(&self, r: &ObsArray) -> Result<f64> {
        Ok(0.5 * inner_obs(r, r, self.layout())?)
    }
}

/// Forward solve, misfit, first-order adjoint and gradient at one control.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub control: Control,
    pub beta: Field,
    pub forward: StateTrajectory,
    pub misfit: ObsArray,
    pub cost: f64,
    pub adjoint: AdjointSolution,
    pub gradient: Field,
}

impl Linearization {
    pub fn at(p: &AssimilationProblem, c: &Control) -> Result<Self> {
        let (forward, beta) = forward_with_beta(p, c)?;
        let misfit = p.misfit(&forward)?;
        let cost = p.cost_of_misfit(&misfit)?;
        Self::complete(p, c, beta, forward, misfit, cost)
    }

    /// Adds the adjoint and gradient to an already evaluated forward run.
    fn complete(
        p: &AssimilationProblem,
        c: &Control,
        beta: Field,
        forward: StateTrajectory,
        misfit: ObsArray,
        cost: f64,
    ) -> Result<Self> {
        let forcing = AdjointForcing::observations(misfit.clone(), p.layout().clone());
        let adjoint = solve_foa(&forward, &beta, &forcing)?;
        let gradient = gradient_from_adjoint(p.kind, &adjoint);
        Ok(Self { control: c.clone(), beta, forward, misfit, cost, adjoint, gradient })
    }
}

fn forward_with_beta(p: &AssimilationProblem, c: &Control) -> Result<(StateTrajectory, Field)> {
    let fp = p.forward_problem(c)?;
    Ok((solve_forward(&fp)?, fp.beta))
}

pub(crate) fn gradient_from_adjoint(kind: ControlKind, adjoint: &AdjointSolution) -> Field {
    match kind {
        ControlKind::InitialCondition => adjoint.eta_initial().scaled(-1.0),
        ControlKind::Bathymetry => adjoint.u_deta_dx_integral().clone(),
    }
}

/// `J = 1/2 int_0^T sum_j (eta(x_j, t) - y_j(t))^2 dt` with trapezoid quadrature.
pub fn cost(p: &AssimilationProblem, c: &Control) -> Result<f64> {
    let traj = solve_forward(&p.forward_problem(c)?)?;
    p.cost_of_misfit(&p.misfit(&traj)?)
}

/// L² gradient with respect to the initial height: `-eta*(x, 0)`.
pub fn gradient_ic(p: &AssimilationProblem, c: &Control) -> Result<Field> {
    if p.kind != ControlKind::InitialCondition {
        return Err(Error::Domain("gradient_ic needs an initial-condition problem".into()));
    }
    Ok(Linearization::at(p, c)?.gradient)
}

/// L² gradient with respect to the bathymetry: `int_0^T u d(eta*)/dx dt`.
pub fn gradient_bathy(p: &AssimilationProblem, c: &Control) -> Result<Field> {
    if p.kind != ControlKind::Bathymetry {
        return Err(Error::Domain("gradient_bathy needs a bathymetry problem".into()));
    }
    Ok(Linearization::at(p, c)?.gradient)
}

pub fn gradient(p: &AssimilationProblem, c: &Control) -> Result<Field> {
    Ok(Linearization::at(p, c)?.gradient)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Iterate {
    pub iteration: usize,
    pub cost: f64,
    pub grad_norm: f64,
    /// Accepted step length (zero for the starting point).
    pub step: f64,
}

#[derive(Debug, Clone)]
pub struct DescentReport {
    pub iterates: Vec<Iterate>,
    pub control: Control,
    pub converged: bool,
    /// Absolute gradient-norm tolerance that was applied.
    pub tol: f64,
}

impl DescentReport {
    pub fn final_cost(&self) -> f64 {
        self.iterates.last().map_or(f64::NAN, |i| i.cost)
    }

    pub fn final_grad_norm(&self) -> f64 {
        self.iterates.last().map_or(f64::NAN, |i| i.grad_norm)
    }

    pub fn initial_grad_norm(&self) -> f64 {
        self.iterates.first().map_or(f64::NAN, |i| i.grad_norm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DescentOptions {
    pub max_iters: usize,
    /// Absolute tolerance on `||grad J||`; `None` means `rel_tol * ||grad J(first guess)||`.
    pub tol: Option<f64>,
    pub rel_tol: f64,
    pub armijo_c1: f64,
    pub max_halvings: usize,
    /// Relative cost change treated as roundoff; inside this band a trial step is accepted
    /// when the slope along the step is still sufficiently negative.
    pub cost_noise: f64,
}

impl Default for DescentOptions {
    fn default() -> Self {
        Self { max_iters: 200, tol: None, rel_tol: 1e-8, armijo_c1: 1e-4, max_halvings: 40, cost_noise: 1e-12 }
    }
}

/// Steepest descent from the problem's first guess; see [`descend_from`].
pub fn descend(p: &AssimilationProblem, max_iters: usize, tol: Option<f64>) -> Result<DescentReport> {
    descend_with(p, &DescentOptions { max_iters, tol, ..DescentOptions::default() })
}

pub fn descend_with(p: &AssimilationProblem, opts: &DescentOptions) -> Result<DescentReport> {
    descend_from(p, &p.first_guess, opts)
}

/// Parameter of the approximate sufficient-decrease test used once cost differences are
/// below roundoff: the slope at the trial point may be at most `(1 - 2 * APPROX_ARMIJO)` times
/// the initial descent rate, in magnitude, on the uphill side.
const APPROX_ARMIJO: f64 = 0.1;

/// Steepest descent with backtracking Armijo line search.
///
/// The first trial step comes from a curvature probe along the gradient; later trial steps
/// use the Barzilai-Borwein length `<s,s>/<s,y>` and are halved until the Armijo condition holds.
/// Trial points where the forward model fails (drying, CFL) count as rejected. Near a tight
/// optimum the Armijo decrease drops below the cost's roundoff; trial costs within
/// `cost_noise` of the current one are then accepted on the slope along the step instead.
pub fn descend_from(p: &AssimilationProblem, start: &Control, opts: &DescentOptions) -> Result<DescentReport> {
    p.check_control(start)?;
    let grid = &p.grid;
    let mut lin = Linearization::at(p, start)?;
    let mut gnorm = lin.gradient.norm_l2(grid);
    let tol = opts.tol.unwrap_or(opts.rel_tol * gnorm);
    let mut report = DescentReport {
        iterates: vec![Iterate { iteration: 0, cost: lin.cost, grad_norm: gnorm, step: 0.0 }],
        control: start.clone(),
        converged: gnorm <= tol,
        tol,
    };
    if report.converged {
        return Ok(report);
    }
    let mut alpha = curvature_step(p, &lin, gnorm)?;
    for iteration in 1..=opts.max_iters {
        let dir = lin.gradient.scaled(-1.0);
        let Some((new, trial)) = line_search(p, &lin, &dir, alpha, opts)? else {
            return Err(Error::Stall { iteration, halvings: opts.max_halvings, report: Box::new(report) });
        };
        let s = new.control.field.add_scaled(-1.0, &lin.control.field);
        let y = new.gradient.add_scaled(-1.0, &lin.gradient);
        let sy = inner_l2_space(&s, &y, grid)?;
        let ss = inner_l2_space(&s, &s, grid)?;
        alpha = if sy > 0.0 { ss / sy } else { 2.0 * trial };
        lin = new;
        gnorm = lin.gradient.norm_l2(grid);
        report.iterates.push(Iterate { iteration, cost: lin.cost, grad_norm: gnorm, step: trial });
        report.control = lin.control.clone();
        log::debug!("descent iteration {iteration}: J = {:.6e}, |grad| = {gnorm:.3e}, step = {trial:.3e}", lin.cost);
        if gnorm <= tol {
            report.converged = true;
            break;
        }
    }
    Ok(report)
}

/// Backtracking along `dir` from step `alpha`, halving until the Armijo condition (or, inside
/// the roundoff band, the slope condition) holds. `None` when every halving was rejected.
fn line_search(
    p: &AssimilationProblem,
    lin: &Linearization,
    dir: &Field,
    alpha: f64,
    opts: &DescentOptions,
) -> Result<Option<(Linearization, f64)>> {
    let grid = &p.grid;
    let slope = inner_l2_space(&lin.gradient, dir, grid)?;
    let mut trial = alpha;
    for _ in 0..=opts.max_halvings {
        let c = Control { kind: p.kind, field: lin.control.field.add_scaled(trial, dir) };
        let (forward, beta) = match forward_with_beta(p, &c) {
            Ok(v) => v,
            Err(Error::Drying { .. } | Error::Stability { .. } | Error::Divergence { .. }) => {
                trial *= 0.5;
                continue;
            }
            Err(e) => return Err(e),
        };
        let misfit = p.misfit(&forward)?;
        let j = p.cost_of_misfit(&misfit)?;
        if j <= lin.cost + opts.armijo_c1 * trial * slope {
            return Ok(Some((Linearization::complete(p, &c, beta, forward, misfit, j)?, trial)));
        }
        if j - lin.cost <= opts.cost_noise * lin.cost.abs() {
            // cost change lost in roundoff: fall back to the slope along the step
            let l = Linearization::complete(p, &c, beta, forward, misfit, j)?;
            if inner_l2_space(&l.gradient, dir, grid)? <= -(1.0 - 2.0 * APPROX_ARMIJO) * slope {
                return Ok(Some((l, trial)));
            }
        }
        trial *= 0.5;
    }
    Ok(None)
}

/// Limited-memory BFGS with the same line search and stopping rule as [`descend_from`].
///
/// Much faster than steepest descent on ill-conditioned problems; used by the brute-force
/// sensitivity oracle, which re-optimises hundreds of perturbed problems. `memory` is the
/// number of stored correction pairs.
pub fn quasi_newton_from(
    p: &AssimilationProblem,
    start: &Control,
    opts: &DescentOptions,
    memory: usize,
) -> Result<DescentReport> {
    p.check_control(start)?;
    let grid = &p.grid;
    let dot = |a: &Field, b: &Field| inner_l2_space(a, b, grid);
    let mut lin = Linearization::at(p, start)?;
    let mut gnorm = lin.gradient.norm_l2(grid);
    let tol = opts.tol.unwrap_or(opts.rel_tol * gnorm);
    let mut report = DescentReport {
        iterates: vec![Iterate { iteration: 0, cost: lin.cost, grad_norm: gnorm, step: 0.0 }],
        control: start.clone(),
        converged: gnorm <= tol,
        tol,
    };
    if report.converged {
        return Ok(report);
    }
    let mut pairs: std::collections::VecDeque<(Field, Field, f64)> = std::collections::VecDeque::new();
    let mut first_step = curvature_step(p, &lin, gnorm)?;
    for iteration in 1..=opts.max_iters {
        // two-loop recursion for -H_k g
        let mut q = lin.gradient.clone();
        let mut coefs = Vec::with_capacity(pairs.len());
        for (s, y, rho) in pairs.iter().rev() {
            let a = rho * dot(s, &q)?;
            q.axpy(-a, y);
            coefs.push(a);
        }
        if let Some((s, y, _)) = pairs.back() {
            q = q.scaled(dot(s, y)? / dot(y, y)?);
        }
        for ((s, y, rho), a) in pairs.iter().zip(coefs.into_iter().rev()) {
            let b = rho * dot(y, &q)?;
            q.axpy(a - b, s);
        }
        let mut dir = q.scaled(-1.0);
        let mut alpha = 1.0;
        if pairs.is_empty() || dot(&dir, &lin.gradient)? >= 0.0 {
            pairs.clear();
            dir = lin.gradient.scaled(-1.0);
            alpha = first_step;
        }
        let Some((new, trial)) = line_search(p, &lin, &dir, alpha, opts)? else {
            return Err(Error::Stall { iteration, halvings: opts.max_halvings, report: Box::new(report) });
        };
        let s = new.control.field.add_scaled(-1.0, &lin.control.field);
        let y = new.gradient.add_scaled(-1.0, &lin.gradient);
        let sy = dot(&s, &y)?;
        if sy > 0.0 {
            first_step = dot(&s, &s)? / sy;
            if pairs.len() == memory.max(1) {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        lin = new;
        gnorm = lin.gradient.norm_l2(grid);
        report.iterates.push(Iterate { iteration, cost: lin.cost, grad_norm: gnorm, step: trial });
        report.control = lin.control.clone();
        log::debug!("l-bfgs iteration {iteration}: J = {:.6e}, |grad| = {gnorm:.3e}, step = {trial:.3e}", lin.cost);
        if gnorm <= tol {
            report.converged = true;
            break;
        }
    }
    Ok(report)
}

/// Step `|g|^2 / <g, H g>` along the steepest-descent direction from a gradient difference.
fn curvature_step(p: &AssimilationProblem, lin: &Linearization, gnorm: f64) -> Result<f64> {
    let grid = &p.grid;
    let scale = lin.control.field.norm_l2(grid).max(1e-3);
    let h = 1e-4 * scale / gnorm;
    let probe = Control { kind: p.kind, field: lin.control.field.add_scaled(-h, &lin.gradient) };
    let fallback = scale / gnorm;
    let g_probe = match Linearization::at(p, &probe) {
        Ok(l) => l.gradient,
        Err(Error::Drying { .. } | Error::Stability { .. } | Error::Divergence { .. }) => return Ok(fallback),
        Err(e) => return Err(e),
    };
    let curvature = inner_l2_space(&lin.gradient.add_scaled(-1.0, &g_probe), &lin.gradient, grid)? / h;
    Ok(if curvature > 0.0 { gnorm * gnorm / curvature } else { fallback })
}

/// Twin experiment observed at every solver level.
pub fn make_twin(
    grid: &Grid,
    true_control: &Control,
    known_counterpart: &Field,
    station_positions: &[f64],
    noise_sd: f64,
    rng_seed: u64,
) -> Result<AssimilationProblem> {
    let layout = ObservationLayout::strided(grid, station_positions.to_vec(), 0, 1)?;
    make_twin_with_layout(grid, true_control, known_counterpart, layout, noise_sd, rng_seed)
}

/// Runs the truth forward, samples it on `layout` and adds seeded Gaussian noise.
/// The first guess is the zero field.
pub fn make_twin_with_layout(
    grid: &Grid,
    true_control: &Control,
    known_counterpart: &Field,
    layout: ObservationLayout,
    noise_sd: f64,
    rng_seed: u64,
) -> Result<AssimilationProblem> {
    if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
        return Err(Error::Domain(format!("noise standard deviation must be non-negative, got {noise_sd}")));
    }
    let kind = true_control.kind;
    let stub = AssimilationProblem {
        grid: grid.clone(),
        kind,
        known_counterpart: known_counterpart.clone(),
        observations: ObservationSet { heights: layout.zeros(), layout: layout.clone() },
        first_guess: Control { kind, field: grid.zeros() },
    };
    let truth = solve_forward(&stub.forward_problem(true_control)?)?;
    let mut heights = observe(&truth, &layout)?;
    if noise_sd > 0.0 {
        let normal = Normal::new(0.0, noise_sd).map_err(|e| Error::Domain(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        for v in heights.as_mut_slice() {
            *v += normal.sample(&mut rng);
        }
    }
    AssimilationProblem::new(
        grid.clone(),
        kind,
        known_counterpart.clone(),
        ObservationSet::new(layout, heights)?,
        Control { kind, field: grid.zeros() },
    )
}

/// First-order kappa sweep `[J(c + eps d) - J(c)] / (eps <grad J(c), d>)`.
pub fn kappa_first_order(p: &AssimilationProblem, c: &Control, dir: &Field, epsilons: &[f64]) -> Result<Vec<(f64, f64)>> {
    use rayon::prelude::*;
    p.grid.check_field(dir, "kappa direction")?;
    let lin = Linearization::at(p, c)?;
    let denom = inner_l2_space(&lin.gradient, dir, &p.grid)?;
    if denom.abs() <= 1e-14 {
        return Err(Error::Degenerate(format!("<grad J, d> = {denom:.3e} is too small for a kappa test")));
    }
    epsilons
        .par_iter()
        .map(|&eps| {
            let j = cost(p, &Control { kind: c.kind, field: c.field.add_scaled(eps, dir) })?;
            Ok((eps, (j - lin.cost) / (eps * denom)))
        })
        .collect()
}
