//! Backward-in-time solvers for the first-order, second-order and forced adjoint systems.
//!
//! First-order adjoint (bathymetry `beta`, flat bottom for the IC variants):
//!
//! ```text
//! d(eta*)/dt + u d(eta*)/dx + d(u*)/dx         = H(eta - y)
//! d(u*)/dt   + (1+eta-beta) d(eta*)/dx + u d(u*)/dx = 0
//! eta*(x,T) = u*(x,T) = 0
//! ```
//!
//! Each backward step is the transpose of the SSP-RK3 tangent step, a three-stage scheme for
//! the system above whose frozen coefficients are the forward stage states (recomputed from
//! the stored levels). Time-integral forcing is applied as trapezoid-weighted pulses at each
//! level, so the cost's quadrature and the adjoint forcing use identical weights.
//!
//! Row `k` of an adjoint trajectory holds the solution at `t_k` just before (in forward
//! time) the level-`k` pulse; the last row holds the zero terminal condition.

use crate::domain::{inject, observe, ControlKind, Field, Grid, ObsArray, ObservationLayout, StateTrajectory};
use crate::error::{Error, Result};
use crate::scheme::{forward_stages, Ops, Pair};

/// Right-hand side of an adjoint system.
#[derive(Debug, Clone, Default)]
pub struct AdjointForcing {
    /// Observation-space residual, scattered into the `eta*` equation by [`inject`].
    pub obs_residual: Option<(ObsArray, ObservationLayout)>,
    /// Per-level space-time densities added to the `(eta*, u*)` equations.
    pub volumetric: Option<(Vec<Field>, Vec<Field>)>,
}

impl AdjointForcing {
    pub fn observations(residual: ObsArray, layout: ObservationLayout) -> Self {
        Self { obs_residual: Some((residual, layout)), volumetric: None }
    }

    pub fn volumetric(f_eta: Vec<Field>, f_u: Vec<Field>) -> Self {
        Self { obs_residual: None, volumetric: Some((f_eta, f_u)) }
    }

    fn validate(&self, grid: &Grid) -> Result<()> {
        if self.obs_residual.is_none() && self.volumetric.is_none() {
            return Err(Error::Alignment("adjoint forcing needs at least one component".into()));
        }
        if let Some((f_eta, f_u)) = &self.volumetric {
            if f_eta.len() != grid.n_levels() || f_u.len() != grid.n_levels() {
                return Err(Error::Alignment(format!(
                    "volumetric forcing needs {} levels, got {} and {}",
                    grid.n_levels(),
                    f_eta.len(),
                    f_u.len()
                )));
            }
            for f in f_eta.iter().chain(f_u) {
                grid.check_field(f, "volumetric forcing")?;
            }
        }
        Ok(())
    }

    /// Pulse added at each level: trapezoid weight times the forcing density.
    fn pulses(&self, grid: &Grid) -> Result<Vec<Option<Pair>>> {
        self.validate(grid)?;
        let n = grid.n_cells();
        let mut out: Vec<Option<Pair>> = vec![None; grid.n_levels()];
        if let Some((residual, layout)) = &self.obs_residual {
            let scattered = inject(residual, layout, grid)?;
            for &k in layout.levels() {
                let w = grid.time_weight(k);
                let p = out[k].get_or_insert_with(|| Pair::zeros(n));
                for (a, b) in p.eta.iter_mut().zip(scattered[k].iter()) {
                    *a += w * b;
                }
            }
        }
        if let Some((f_eta, f_u)) = &self.volumetric {
            for k in 0..grid.n_levels() {
                if f_eta[k].iter().chain(f_u[k].iter()).all(|&v| v == 0.0) {
                    continue;
                }
                let w = grid.time_weight(k);
                let p = out[k].get_or_insert_with(|| Pair::zeros(n));
                for i in 0..n {
                    p.eta[i] += w * f_eta[k][i];
                    p.u[i] += w * f_u[k][i];
                }
            }
        }
        Ok(out)
    }
}

/// Which sign the response-function partials carry in the forced first-order adjoint systems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignConvention {
    /// `-dG/deta`, `-dG/du` on the right for both control kinds; with this choice the
    /// assembled `F` is the reduced gradient of `G` and the sensitivity matches finite differences.
    #[default]
    Consistent,
    /// The IC system carries `+dG/deta`, `+dG/du` while the bathymetry system keeps `-`.
    FlippedIc,
}

/// Solution of a backward adjoint solve.
#[derive(Debug, Clone)]
pub struct AdjointSolution {
    pub traj: StateTrajectory,
    terminal_left: Pair,
    u_deta_dx: Field,
    layout: Option<ObservationLayout>,
}

impl AdjointSolution {
    /// `eta*(x, 0)`.
    pub fn eta_initial(&self) -> Field {
        self.traj.eta_field(0)
    }

    /// `int_0^T u d(eta*)/dx dt`, accumulated with the stage quadrature of the backward scheme.
    pub fn u_deta_dx_integral(&self) -> &Field {
        &self.u_deta_dx
    }

    /// Adjoint value entering the backward step that ends at level `k`.
    fn left_limit(&self, level: usize) -> Pair {
        if level + 1 == self.traj.n_levels() {
            self.terminal_left.clone()
        } else {
            Pair::from_slices(self.traj.eta(level), self.traj.u(level))
        }
    }
}

/// Forward stage states of step `n`, recomputed from the stored level.
fn base_stages(ops: &Ops, base: &StateTrajectory, beta: &[f64], n: usize, dt: f64) -> [Pair; 3] {
    forward_stages(ops, &Pair::from_slices(base.eta(n), base.u(n)), beta, dt).0
}

/// Tangent stage states of step `n` about the base stages `s`.
fn tangent_stages(ops: &Ops, s: &[Pair; 3], beta: &[f64], p: Pair, beta_hat: Option<&[f64]>, dt: f64) -> [Pair; 3] {
    let g0 = ops.tangent_rhs(&s[0], beta, &p, beta_hat);
    let p1 = Pair::stage(0.0, &p, 1.0, &p, dt, &g0);
    let g1 = ops.tangent_rhs(&s[1], beta, &p1, beta_hat);
    let p2 = Pair::stage(0.75, &p, 0.25, &p1, dt, &g1);
    [p, p1, p2]
}

/// Transpose of one SSP-RK3 tangent step. Returns the stage adjoints `[a1, a2]` and the
/// adjoint at the start of the step.
fn backward_step(ops: &Ops, beta: &[f64], s: &[Pair; 3], lam: &Pair, dt: f64) -> ([Pair; 2], Pair) {
    let r = ops.adjoint_rhs(&s[2], beta, lam);
    let a2 = Pair::stage(0.0, lam, 2.0 / 3.0, lam, dt, &r);
    let r = ops.adjoint_rhs(&s[1], beta, &a2);
    let a1 = Pair::stage(0.0, &a2, 0.25, &a2, dt, &r);
    let r = ops.adjoint_rhs(&s[0], beta, &a1);
    let mut prev = Pair::stage(0.75, &a2, 1.0, &a1, dt, &r);
    add_scaled(&mut prev, 1.0 / 3.0, lam);
    ([a1, a2], prev)
}

fn add_scaled(out: &mut Pair, alpha: f64, x: &Pair) {
    for (o, v) in out.eta.iter_mut().zip(&x.eta) {
        *o += alpha * v;
    }
    for (o, v) in out.u.iter_mut().zip(&x.u) {
        *o += alpha * v;
    }
}

/// Stage multipliers `(2/3) lam`, `(1/4) a2`, `a1` paired with the stages `S2`, `S1`, `S0`
/// they act on: the discrete form of `int u d(eta*)/dx dt` over one step.
fn accumulate_u_deta(ops: &Ops, acc: &mut [f64], coef: [&Pair; 3], lam: &Pair, stage_adj: &[Pair; 2], dt: f64) {
    let terms = [(coef[2], lam, 2.0 / 3.0), (coef[1], &stage_adj[1], 0.25), (coef[0], &stage_adj[0], 1.0)];
    for (c, a, w) in terms {
        let da = ops.ddx_vec(&a.eta);
        for i in 0..acc.len() {
            acc[i] += dt * w * c.u[i] * da[i];
        }
    }
}

fn store(traj: &mut StateTrajectory, level: usize, p: &Pair) {
    traj.eta_mut(level).copy_from_slice(&p.eta);
    traj.u_mut(level).copy_from_slice(&p.u);
}

/// First-order adjoint about `base` (solved with bathymetry `beta`).
///
/// The backward step is the transpose of the SSP-RK3 tangent step, so the resulting gradient
/// is the exact derivative of the discrete cost.
pub fn solve_foa(base: &StateTrajectory, beta: &Field, forcing: &AdjointForcing) -> Result<AdjointSolution> {
    let grid = base.grid();
    grid.check_field(beta, "bathymetry")?;
    let pulses = forcing.pulses(grid)?;
    let ops = Ops::new(grid);
    let dt = grid.dt();
    let n_cells = grid.n_cells();

    let mut traj = StateTrajectory::zeros(grid);
    let mut lam = Pair::zeros(n_cells);
    if let Some(p) = &pulses[grid.n_steps()] {
        lam.sub_assign(p);
    }
    let terminal_left = lam.clone();
    let mut integral = vec![0.0; n_cells];
    for n in (0..grid.n_steps()).rev() {
        let s = base_stages(&ops, base, beta, n, dt);
        let (stage_adj, mut prev) = backward_step(&ops, beta, &s, &lam, dt);
        accumulate_u_deta(&ops, &mut integral, [&s[0], &s[1], &s[2]], &lam, &stage_adj, dt);
        if let Some(p) = &pulses[n] {
            prev.sub_assign(p);
        }
        if !prev.is_finite() {
            return Err(Error::Divergence { level: n });
        }
        store(&mut traj, n, &prev);
        lam = prev;
    }
    Ok(AdjointSolution {
        traj,
        terminal_left,
        u_deta_dx: Field(integral),
        layout: forcing.obs_residual.as_ref().map(|(_, l)| l.clone()),
    })
}

pub fn solve_foa_ic(base: &StateTrajectory, forcing: &AdjointForcing) -> Result<AdjointSolution> {
    solve_foa(base, &base.grid().zeros(), forcing)
}

pub fn solve_foa_bathy(base: &StateTrajectory, beta: &Field, forcing: &AdjointForcing) -> Result<AdjointSolution> {
    solve_foa(base, beta, forcing)
}

/// Second-order adjoint: the derivative of the first-order adjoint `foa` along the tangent
/// trajectory `tangent` (produced by the control perturbation `beta_hat` for bathymetry).
///
/// Each first-order step is recomputed alongside so the cross terms
/// `u_hat d(eta*)/dx`, `(eta_hat - beta_hat) d(eta*)/dx`, `u_hat d(u*)/dx` see its stage values.
/// Forcing is `+H^T H eta_hat` when `foa` was driven by observations.
pub fn solve_soa(
    base: &StateTrajectory,
    beta: &Field,
    foa: &AdjointSolution,
    tangent: &StateTrajectory,
    beta_hat: Option<&Field>,
) -> Result<AdjointSolution> {
    let grid = base.grid();
    if tangent.grid() != grid || foa.traj.grid() != grid {
        return Err(Error::Alignment("base, first-order adjoint and tangent must share a grid".into()));
    }
    grid.check_field(beta, "bathymetry")?;
    if let Some(bh) = beta_hat {
        grid.check_field(bh, "bathymetry perturbation")?;
    }
    let bh = beta_hat.map(|b| &b[..]);
    let pulses = match &foa.layout {
        Some(layout) => {
            AdjointForcing::observations(observe(tangent, layout)?, layout.clone()).pulses(grid)?
        }
        None => vec![None; grid.n_levels()],
    };
    let ops = Ops::new(grid);
    let dt = grid.dt();
    let n_cells = grid.n_cells();

    let mut traj = StateTrajectory::zeros(grid);
    let mut bar = Pair::zeros(n_cells);
    if let Some(p) = &pulses[grid.n_steps()] {
        bar.sub_assign(p);
    }
    let terminal_left = bar.clone();
    let mut integral = vec![0.0; n_cells];
    for n in (0..grid.n_steps()).rev() {
        let s = base_stages(&ops, base, beta, n, dt);
        let t = tangent_stages(&ops, &s, beta, Pair::from_slices(tangent.eta(n), tangent.u(n)), bh, dt);
        let lam = foa.left_limit(n + 1);
        let ([a1, a2], _) = backward_step(&ops, beta, &s, &lam, dt);

        let rhs = |st: usize, x: &Pair, a: &Pair| {
            let mut r = ops.adjoint_rhs(&s[st], beta, x);
            r.add_assign(&ops.adjoint_cross(&t[st], bh, a));
            r
        };
        let r = rhs(2, &bar, &lam);
        let b2 = Pair::stage(0.0, &bar, 2.0 / 3.0, &bar, dt, &r);
        let r = rhs(1, &b2, &a2);
        let b1 = Pair::stage(0.0, &b2, 0.25, &b2, dt, &r);
        let r = rhs(0, &b1, &a1);
        let mut prev = Pair::stage(0.75, &b2, 1.0, &b1, dt, &r);
        add_scaled(&mut prev, 1.0 / 3.0, &bar);

        // derivative of the first-order stage quadrature of u d(eta*)/dx
        accumulate_u_deta(&ops, &mut integral, [&t[0], &t[1], &t[2]], &lam, &[a1, a2], dt);
        accumulate_u_deta(&ops, &mut integral, [&s[0], &s[1], &s[2]], &bar, &[b1, b2], dt);

        if let Some(p) = &pulses[n] {
            prev.sub_assign(p);
        }
        if !prev.is_finite() {
            return Err(Error::Divergence { level: n });
        }
        store(&mut traj, n, &prev);
        bar = prev;
    }
    Ok(AdjointSolution { traj, terminal_left, u_deta_dx: Field(integral), layout: None })
}

pub fn solve_soa_ic(base: &StateTrajectory, foa: &AdjointSolution, tangent: &StateTrajectory) -> Result<AdjointSolution> {
    solve_soa(base, &base.grid().zeros(), foa, tangent, None)
}

pub fn solve_soa_bathy(
    base: &StateTrajectory,
    beta: &Field,
    foa: &AdjointSolution,
    tangent: &StateTrajectory,
    beta_hat: &Field,
) -> Result<AdjointSolution> {
    solve_soa(base, beta, foa, tangent, Some(beta_hat))
}

fn signed_partials(g_eta: &[Field], g_u: &[Field], sign: f64) -> (Vec<Field>, Vec<Field>) {
    (g_eta.iter().map(|f| f.scaled(sign)).collect(), g_u.iter().map(|f| f.scaled(sign)).collect())
}

/// Forced first-order adjoint driven by the state partials `g_eta`, `g_u` of a response
/// (per-level densities), about `base` solved with bathymetry `beta`.
pub fn solve_forced_foa(
    base: &StateTrajectory,
    beta: &Field,
    g_eta: &[Field],
    g_u: &[Field],
    kind: ControlKind,
    convention: SignConvention,
) -> Result<AdjointSolution> {
    let sign = match (convention, kind) {
        (SignConvention::FlippedIc, ControlKind::InitialCondition) => 1.0,
        _ => -1.0,
    };
    let (f_eta, f_u) = signed_partials(g_eta, g_u, sign);
    solve_foa(base, beta, &AdjointForcing::volumetric(f_eta, f_u))
}

/// Forced first-order adjoint `(psi, varphi)` for the IC sensitivity system (flat bottom).
pub fn solve_forced_foa_ic(
    base: &StateTrajectory,
    g_eta: &[Field],
    g_u: &[Field],
    convention: SignConvention,
) -> Result<AdjointSolution> {
    solve_forced_foa(base, &base.grid().zeros(), g_eta, g_u, ControlKind::InitialCondition, convention)
}

/// Forced first-order adjoint `(gamma, psi)` for the bathymetry sensitivity system.
pub fn solve_forced_foa_bathy(
    base: &StateTrajectory,
    beta: &Field,
    g_eta: &[Field],
    g_u: &[Field],
    convention: SignConvention,
) -> Result<AdjointSolution> {
    solve_forced_foa(base, beta, g_eta, g_u, ControlKind::Bathymetry, convention)
}
