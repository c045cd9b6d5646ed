//! Nonlinear shallow water solver and its tangent-linear models.
//!
//! ```text
//! d(eta)/dt + d/dx((1 + eta - beta) u) = 0
//! du/dt     + d/dx(u^2/2 + eta)        = 0
//! eta(x,0) = phi(x),  u(x,0) = 0
//! ```
//!
//! Central differences in flux form, fourth-difference damping, SSP-RK3 in time.
//! Tangent solves recompute the base Runge-Kutta stages from each stored level, so they are
//! the exact linearisation of the discrete forward map.

use crate::domain::{Field, Grid, StateTrajectory};
use crate::error::{Error, Result};
use crate::scheme::{forward_stages, Ops, Pair};

#[derive(Debug, Clone)]
pub struct ForwardProblem {
    pub grid: Grid,
    pub phi: Field,
    pub beta: Field,
}

impl ForwardProblem {
    pub fn new(grid: Grid, phi: Field, beta: Field) -> Result<Self> {
        grid.check_field(&phi, "initial height")?;
        grid.check_field(&beta, "bathymetry")?;
        if let Some(i) = (0..grid.n_cells()).find(|&i| 1.0 + phi[i] - beta[i] <= 0.0) {
            return Err(Error::Drying { level: 0, cell: i, depth: 1.0 + phi[i] - beta[i] });
        }
        Ok(Self { grid, phi, beta })
    }

    /// Flat bottom.
    pub fn flat(grid: Grid, phi: Field) -> Result<Self> {
        let beta = grid.zeros();
        Self::new(grid, phi, beta)
    }
}

fn check_level(grid: &Grid, level: usize, y: &Pair, beta: &[f64]) -> Result<()> {
    if !y.is_finite() {
        return Err(Error::Divergence { level });
    }
    let mut courant = 0.0_f64;
    for i in 0..grid.n_cells() {
        let depth = 1.0 + y.eta[i] - beta[i];
        if depth <= 0.0 {
            return Err(Error::Drying { level, cell: i, depth });
        }
        courant = courant.max((y.u[i].abs() + depth.sqrt()) * grid.dt() / grid.dx());
    }
    if courant > grid.c_cfl() {
        return Err(Error::Stability { level, courant, limit: grid.c_cfl() });
    }
    Ok(())
}

fn check_stages(level: usize, stages: &[Pair], beta: &[f64]) -> Result<()> {
    for s in stages {
        if !s.is_finite() {
            return Err(Error::Divergence { level });
        }
        if let Some(i) = (0..beta.len()).find(|&i| 1.0 + s.eta[i] - beta[i] <= 0.0) {
            return Err(Error::Drying { level, cell: i, depth: 1.0 + s.eta[i] - beta[i] });
        }
    }
    Ok(())
}

pub fn solve_forward(p: &ForwardProblem) -> Result<StateTrajectory> {
    let grid = &p.grid;
    let ops = Ops::new(grid);
    let mut traj = StateTrajectory::zeros(grid);
    let mut y = Pair { eta: p.phi.to_vec(), u: vec![0.0; grid.n_cells()] };
    check_level(grid, 0, &y, &p.beta)?;
    traj.eta_mut(0).copy_from_slice(&y.eta);
    for n in 0..grid.n_steps() {
        let (stages, next) = forward_stages(&ops, &y, &p.beta, grid.dt());
        check_stages(n, &stages[1..], &p.beta)?;
        check_level(grid, n + 1, &next, &p.beta)?;
        traj.eta_mut(n + 1).copy_from_slice(&next.eta);
        traj.u_mut(n + 1).copy_from_slice(&next.u);
        y = next;
    }
    Ok(traj)
}

/// Linearised model about `base` (solved with bathymetry `beta`), started from
/// `(eta_hat, u_hat) = (eta_init, 0)` and driven by the bathymetry perturbation `beta_hat`.
pub fn solve_tangent(
    base: &StateTrajectory,
    beta: &Field,
    eta_init: &Field,
    beta_hat: Option<&Field>,
) -> Result<StateTrajectory> {
    let grid = base.grid();
    grid.check_field(beta, "bathymetry")?;
    grid.check_field(eta_init, "tangent initial height")?;
    if let Some(bh) = beta_hat {
        grid.check_field(bh, "bathymetry perturbation")?;
    }
    let ops = Ops::new(grid);
    let dt = grid.dt();
    let bh = beta_hat.map(|b| &b[..]);
    let mut out = StateTrajectory::zeros(grid);
    let mut p = Pair { eta: eta_init.to_vec(), u: vec![0.0; grid.n_cells()] };
    out.eta_mut(0).copy_from_slice(&p.eta);
    for n in 0..grid.n_steps() {
        let y = Pair::from_slices(base.eta(n), base.u(n));
        let (s, _) = forward_stages(&ops, &y, beta, dt);
        let g0 = ops.tangent_rhs(&s[0], beta, &p, bh);
        let p1 = Pair::stage(0.0, &p, 1.0, &p, dt, &g0);
        let g1 = ops.tangent_rhs(&s[1], beta, &p1, bh);
        let p2 = Pair::stage(0.75, &p, 0.25, &p1, dt, &g1);
        let g2 = ops.tangent_rhs(&s[2], beta, &p2, bh);
        let next = Pair::stage(1.0 / 3.0, &p, 2.0 / 3.0, &p2, dt, &g2);
        if !next.is_finite() {
            return Err(Error::Divergence { level: n + 1 });
        }
        out.eta_mut(n + 1).copy_from_slice(&next.eta);
        out.u_mut(n + 1).copy_from_slice(&next.u);
        p = next;
    }
    Ok(out)
}

/// Perturbed model for initial-condition perturbations `eta''` on a flat bottom.
pub fn solve_tangent_ic(base: &StateTrajectory, eta_dd: &Field) -> Result<StateTrajectory> {
    solve_tangent(base, &base.grid().zeros(), eta_dd, None)
}

/// Perturbed model for a bathymetry perturbation `beta_hat`, zero initial perturbation.
pub fn solve_tangent_bathy(base: &StateTrajectory, beta: &Field, beta_hat: &Field) -> Result<StateTrajectory> {
    solve_tangent(base, beta, &base.grid().zeros(), Some(beta_hat))
}

/// Total surface displacement `sum_i eta_i dx` at a level.
pub fn mass(traj: &StateTrajectory, level: usize) -> Result<f64> {
    if level >= traj.n_levels() {
        return Err(Error::Alignment(format!(
            "level {level} out of range (trajectory has {} levels)",
            traj.n_levels()
        )));
    }
    Ok(traj.eta(level).iter().sum::<f64>() * traj.grid().dx())
}
