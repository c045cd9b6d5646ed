//! Matrix-free Hessian-vector products of the misfit cost, second-order kappa tests and a
//! conjugate-gradient solver for `H nu = F`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::adjoint::solve_soa;
use crate::assimilate::{AssimilationProblem, Linearization};
use crate::domain::{inner_l2_space_unchecked, Control, ControlKind, Field};
use crate::error::{Error, Result};
use crate::solver::solve_tangent;

/// Hessian of `J` at a fixed control, with the forward and first-order adjoint solves cached.
#[derive(Debug, Clone)]
pub struct HessianOperator {
    problem: AssimilationProblem,
    lin: Linearization,
    tikhonov: f64,
}

impl HessianOperator {
    pub fn new(problem: AssimilationProblem, at: &Control) -> Result<Self> {
        let lin = Linearization::at(&problem, at)?;
        Ok(Self { problem, lin, tikhonov: 0.0 })
    }

    /// Adds `mu * I` to the operator applied by [`solve_hnu_f`].
    pub fn with_tikhonov(mut self, mu: f64) -> Result<Self> {
        if !(mu >= 0.0 && mu.is_finite()) {
            return Err(Error::Domain(format!("Tikhonov shift must be non-negative, got {mu}")));
        }
        self.tikhonov = mu;
        Ok(self)
    }

    pub fn tikhonov(&self) -> f64 {
        self.tikhonov
    }

    pub fn problem(&self) -> &AssimilationProblem {
        &self.problem
    }

    pub fn control(&self) -> &Control {
        &self.lin.control
    }

    pub fn kind(&self) -> ControlKind {
        self.problem.kind
    }

    pub fn linearization(&self) -> &Linearization {
        &self.lin
    }

    /// Moves the linearization point, rebuilding the cached solves.
    pub fn relinearize(&mut self, at: &Control) -> Result<()> {
        if at != &self.lin.control {
            self.lin = Linearization::at(&self.problem, at)?;
        }
        Ok(())
    }

    /// `grad^2 J` applied to a direction of the problem's control kind.
    pub fn hvp(&self, dir: &Field) -> Result<Field> {
        let grid = &self.problem.grid;
        grid.check_field(dir, "Hessian direction")?;
        let lin = &self.lin;
        match self.problem.kind {
            ControlKind::InitialCondition => {
                let tangent = solve_tangent(&lin.forward, &lin.beta, dir, None)?;
                let soa = solve_soa(&lin.forward, &lin.beta, &lin.adjoint, &tangent, None)?;
                Ok(soa.eta_initial().scaled(-1.0))
            }
            ControlKind::Bathymetry => {
                let tangent = solve_tangent(&lin.forward, &lin.beta, &grid.zeros(), Some(dir))?;
                let soa = solve_soa(&lin.forward, &lin.beta, &lin.adjoint, &tangent, Some(dir))?;
                Ok(soa.u_deta_dx_integral().clone())
            }
        }
    }

    /// `(H + mu I) dir`.
    pub fn apply(&self, dir: &Field) -> Result<Field> {
        let mut out = self.hvp(dir)?;
        if self.tikhonov > 0.0 {
            out.axpy(self.tikhonov, dir);
        }
        Ok(out)
    }

    fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        inner_l2_space_unchecked(a, b, self.problem.grid.dx())
    }
}

/// Hessian action for the initial-condition control: `-eta_bar(x, 0)`.
pub fn hvp_ic(op: &HessianOperator, eta_dd: &Field) -> Result<Field> {
    if op.kind() != ControlKind::InitialCondition {
        return Err(Error::Domain("hvp_ic needs an initial-condition problem".into()));
    }
    op.hvp(eta_dd)
}

/// Hessian action for the bathymetry control: `int_0^T (u_hat d(eta*)/dx + u d(eta_bar)/dx) dt`.
pub fn hvp_bathy(op: &HessianOperator, beta_hat: &Field) -> Result<Field> {
    if op.kind() != ControlKind::Bathymetry {
        return Err(Error::Domain("hvp_bathy needs a bathymetry problem".into()));
    }
    op.hvp(beta_hat)
}

/// `kappa(eps) = [J'(c + eps eta''; eta') - J'(c; eta')] / (eps <H eta'', eta'>)` for each `eps`.
pub fn kappa_second_order(
    op: &HessianOperator,
    eta_p: &Field,
    eta_dd: &Field,
    epsilons: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let h = op.hvp(eta_dd)?;
    let denom = op.inner(&h, eta_p);
    if denom.abs() <= 1e-14 {
        return Err(Error::Degenerate(format!("<H eta'', eta'> = {denom:.3e} is too small for a kappa test")));
    }
    let c = op.control();
    let base = op.inner(&op.lin.gradient, eta_p);
    epsilons
        .par_iter()
        .map(|&eps| {
            let shifted = Control { kind: c.kind, field: c.field.add_scaled(eps, eta_dd) };
            let g = Linearization::at(&op.problem, &shifted)?.gradient;
            Ok((eps, (op.inner(&g, eta_p) - base) / (eps * denom)))
        })
        .collect()
}

/// Smooth random direction: a few Fourier modes with uniform random coefficients,
/// normalised to unit L² norm.
pub fn random_direction(grid: &crate::domain::Grid, rng: &mut impl Rng, modes: usize) -> Field {
    let l = grid.half_length();
    let mut f = grid.zeros();
    for k in 1..=modes.max(1) {
        let (a, b): (f64, f64) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let w = std::f64::consts::PI * k as f64 / l;
        for (i, x) in grid.xs().into_iter().enumerate() {
            f[i] += (a * (w * x).cos() + b * (w * x).sin()) / k as f64;
        }
    }
    let norm = f.norm_l2(grid);
    if norm > 0.0 {
        f.scaled(1.0 / norm)
    } else {
        f
    }
}

/// Largest relative asymmetry `|<Hu,v> - <u,Hv>| / (||Hu|| ||v||)` over random pairs.
pub fn symmetry_check(op: &HessianOperator, trials: usize, rng_seed: u64) -> Result<f64> {
    if trials == 0 {
        return Err(Error::Domain("symmetry check needs at least one trial".into()));
    }
    let grid = &op.problem.grid;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let pairs: Vec<(Field, Field)> =
        (0..trials).map(|_| (random_direction(grid, &mut rng, 8), random_direction(grid, &mut rng, 8))).collect();
    let values = pairs
        .par_iter()
        .map(|(u, v)| {
            let (hu, hv) = (op.hvp(u)?, op.hvp(v)?);
            let scale = hu.norm_l2(grid) * v.norm_l2(grid);
            let gap = (op.inner(&hu, v) - op.inner(u, &hv)).abs();
            Ok(if scale > 0.0 { gap / scale } else { gap })
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(values.into_iter().fold(0.0, f64::max))
}

/// Result of a conjugate-gradient solve.
#[derive(Debug, Clone, Serialize)]
pub struct CgSolution {
    pub nu: Field,
    pub iterations: usize,
    /// Relative residual `||H nu - F|| / ||F||` after each iteration, starting with 1.
    pub residual_history: Vec<f64>,
}

/// Conjugate residuals for `(H + mu I) nu = F` in the L² inner product, stopping when
/// `||H nu - F|| <= rel_tol ||F||`.
///
/// This is the conjugate-gradient recurrence with `H`-conjugacy replaced by `H^2`-conjugacy: the
/// same Krylov space and one Hessian-vector product per iteration, but each iterate minimises the
/// residual norm, so the residual history is non-increasing (plain CG residuals can spike by an
/// order of magnitude on ill-conditioned Hessians).
pub fn solve_hnu_f(op: &HessianOperator, f: &Field, rel_tol: f64, max_iter: usize) -> Result<CgSolution> {
    let grid = &op.problem.grid;
    grid.check_field(f, "right-hand side")?;
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("right-hand side must be finite".into()));
    }
    let f_norm = f.norm_l2(grid);
    let mut nu = grid.zeros();
    let mut history = vec![1.0];
    if f_norm == 0.0 {
        return Ok(CgSolution { nu, iterations: 0, residual_history: vec![0.0] });
    }
    let mut r = f.clone();
    let mut hr = op.apply(&r)?;
    let mut p = r.clone();
    let mut hp = hr.clone();
    let mut rhr = op.inner(&r, &hr);
    for iteration in 1..=max_iter {
        if rhr <= 0.0 {
            return Err(Error::NotPositiveDefinite { iteration, curvature: rhr, direction: r.into_inner() });
        }
        let alpha = rhr / op.inner(&hp, &hp);
        nu.axpy(alpha, &p);
        r.axpy(-alpha, &hp);
        let rel = r.norm_l2(grid) / f_norm;
        history.push(rel);
        log::debug!("cg iteration {iteration}: relative residual {rel:.3e}");
        if rel <= rel_tol {
            return Ok(CgSolution { nu, iterations: iteration, residual_history: history });
        }
        hr = op.apply(&r)?;
        let rhr_new = op.inner(&r, &hr);
        let beta = rhr_new / rhr;
        p = r.add_scaled(beta, &p);
        hp = hr.add_scaled(beta, &hp);
        rhr = rhr_new;
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        final_residual: history.last().copied().unwrap_or(1.0),
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assimilate::make_twin;
    use crate::domain::Grid;

    fn op(kind: ControlKind) -> HessianOperator {
        op_at(kind, 0.6)
    }

    /// Operator at `scale` times the truth of a noise-free twin.
    fn op_at(kind: ControlKind, scale: f64) -> HessianOperator {
        let g = Grid::new(1.0, 40, 0.015, 60).unwrap();
        let hump = g.field_from_fn(|x| 0.1 * (-(x / 0.15f64).powi(2)).exp());
        let bar = g.field_from_fn(|x| 0.08 * (-((x - 0.2) / 0.2f64).powi(2)).exp());
        let stations: Vec<f64> = (0..10).map(|j| -0.91 + 0.187 * j as f64).collect();
        let (truth, known) = match kind {
            ControlKind::InitialCondition => (Control::initial_condition(hump), g.zeros()),
            ControlKind::Bathymetry => (Control::bathymetry(bar), hump),
        };
        let p = make_twin(&g, &truth, &known, &stations, 0.0, 0).unwrap();
        let at = Control { kind, field: truth.field.scaled(scale) };
        HessianOperator::new(p, &at).unwrap()
    }

    fn dirs(op: &HessianOperator, n: usize) -> Vec<Field> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        (0..n).map(|_| random_direction(&op.problem().grid, &mut rng, 6)).collect()
    }

    #[test]
    fn hvp_is_linear() {
        for kind in [ControlKind::InitialCondition, ControlKind::Bathymetry] {
            let op = op(kind);
            let d = dirs(&op, 2);
            let combo = op.hvp(&d[0].scaled(2.0).add_scaled(-3.0, &d[1])).unwrap();
            let parts = op.hvp(&d[0]).unwrap().scaled(2.0).add_scaled(-3.0, &op.hvp(&d[1]).unwrap());
            assert!(combo.add_scaled(-1.0, &parts).max_abs() <= 1e-10 * parts.max_abs(), "{kind}");
        }
    }

    #[test]
    fn hessian_is_symmetric() {
        for kind in [ControlKind::InitialCondition, ControlKind::Bathymetry] {
            let asym = symmetry_check(&op(kind), 3, 1).unwrap();
            assert!(asym < 1e-9, "{kind}: {asym:e}");
        }
    }

    #[test]
    fn second_order_kappa_is_near_one() {
        for kind in [ControlKind::InitialCondition, ControlKind::Bathymetry] {
            let op = op(kind);
            let d = dirs(&op, 2);
            let k = kappa_second_order(&op, &d[0].scaled(0.01), &d[1].scaled(0.01), &[1e-2, 1e-3, 1e-4]).unwrap();
            let best = k.iter().map(|(_, v)| (v - 1.0).abs()).fold(f64::INFINITY, f64::min);
            assert!(best < 1e-4, "{kind}: {k:?}");
        }
    }

    #[test]
    fn gauss_newton_hessian_at_the_truth_is_positive() {
        let op = op_at(ControlKind::InitialCondition, 1.0);
        assert!(op.linearization().cost < 1e-25);
        for d in dirs(&op, 4) {
            assert!(op.inner(&op.hvp(&d).unwrap(), &d) >= 0.0);
        }
    }

    #[test]
    fn cg_recovers_a_manufactured_solution() {
        let op = op_at(ControlKind::InitialCondition, 1.0).with_tikhonov(1e-3).unwrap();
        let nu_star = dirs(&op, 1).remove(0);
        let f = op.apply(&nu_star).unwrap();
        let sol = solve_hnu_f(&op, &f, 1e-10, 500).unwrap();
        let grid = &op.problem().grid;
        let err = sol.nu.add_scaled(-1.0, &nu_star).norm_l2(grid);
        assert!(err < 1e-6, "error {err:e} after {} iterations", sol.iterations);
        assert_eq!(sol.residual_history.len(), sol.iterations + 1);
        assert!(*sol.residual_history.last().unwrap() <= 1e-10);
        assert!(sol.residual_history.windows(2).all(|r| r[1] <= r[0] * (1.0 + 1e-12)), "residual grew");
    }

    #[test]
    fn cg_reports_non_convergence_with_history() {
        let op = op(ControlKind::InitialCondition);
        let f = dirs(&op, 1).remove(0);
        match solve_hnu_f(&op, &f, 1e-14, 2) {
            Err(Error::NonConvergence { iterations, history, .. }) => {
                assert_eq!(iterations, 2);
                assert_eq!(history.len(), 3);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn zero_right_hand_side_gives_zero() {
        let op = op(ControlKind::Bathymetry);
        let sol = solve_hnu_f(&op, &op.problem().grid.zeros(), 1e-8, 10).unwrap();
        assert_eq!(sol.iterations, 0);
        assert_eq!(sol.nu.max_abs(), 0.0);
    }

    #[test]
    fn kind_specific_entry_points_check_the_kind() {
        let op = op(ControlKind::Bathymetry);
        let d = dirs(&op, 1).remove(0);
        assert!(hvp_ic(&op, &d).is_err());
        assert!(hvp_bathy(&op, &d).is_ok());
    }
}
