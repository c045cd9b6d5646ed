//! Spatial operators and right-hand sides shared by the forward, tangent and adjoint solvers.
//!
//! Central differences are antisymmetric on the periodic mesh and the fourth difference is
//! symmetric, so the adjoint right-hand sides below are exact transposes of the tangent ones
//! at the semi-discrete level.

use crate::domain::Grid;

/// `(eta, u)`-shaped pair of cell arrays.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Pair {
    pub eta: Vec<f64>,
    pub u: Vec<f64>,
}

impl Pair {
    pub fn zeros(n: usize) -> Self {
        Self { eta: vec![0.0; n], u: vec![0.0; n] }
    }

    pub fn from_slices(eta: &[f64], u: &[f64]) -> Self {
        Self { eta: eta.to_vec(), u: u.to_vec() }
    }

    /// `a * x + b * (y + dt * f)`
    pub fn stage(a: f64, x: &Pair, b: f64, y: &Pair, dt: f64, f: &Pair) -> Pair {
        let comb = |x: &[f64], y: &[f64], f: &[f64]| -> Vec<f64> {
            x.iter().zip(y).zip(f).map(|((x, y), f)| a * x + b * (y + dt * f)).collect()
        };
        Pair { eta: comb(&x.eta, &y.eta, &f.eta), u: comb(&x.u, &y.u, &f.u) }
    }

    pub fn sub_assign(&mut self, other: &Pair) {
        for (a, b) in self.eta.iter_mut().zip(&other.eta) {
            *a -= b;
        }
        for (a, b) in self.u.iter_mut().zip(&other.u) {
            *a -= b;
        }
    }

    pub fn add_assign(&mut self, other: &Pair) {
        for (a, b) in self.eta.iter_mut().zip(&other.eta) {
            *a += b;
        }
        for (a, b) in self.u.iter_mut().zip(&other.u) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.eta.iter().chain(&self.u).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Ops {
    n: usize,
    inv2dx: f64,
    damp: f64,
}

impl Ops {
    pub fn new(grid: &Grid) -> Self {
        Self { n: grid.n_cells(), inv2dx: 0.5 / grid.dx(), damp: grid.dissipation() / grid.dt() }
    }

    /// Central first derivative.
    pub fn ddx(&self, v: &[f64], out: &mut [f64]) {
        let n = self.n;
        let h = self.inv2dx;
        out[0] = (v[1] - v[n - 1]) * h;
        out[n - 1] = (v[0] - v[n - 2]) * h;
        for (o, w) in out[1..n - 1].iter_mut().zip(v.windows(3)) {
            *o = (w[2] - w[0]) * h;
        }
    }

    pub fn ddx_vec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        self.ddx(v, &mut out);
        out
    }

    /// `out -= (c / dt) * delta^4 v` with the undivided fourth difference.
    fn sub_damping(&self, v: &[f64], out: &mut [f64]) {
        if self.damp == 0.0 {
            return;
        }
        let n = self.n;
        let d = self.damp;
        let delta4 = |a: f64, b: f64, c: f64, e: f64, f: f64| d * (a - 4.0 * b + 6.0 * c - 4.0 * e + f);
        // wrap-around cells first, then a branch-free interior sweep
        for i in [0, 1, n - 2, n - 1] {
            let at = |k: usize| v[(i + n + k - 2) % n];
            out[i] -= delta4(at(0), at(1), at(2), at(3), at(4));
        }
        for (o, w) in out[2..n - 2].iter_mut().zip(v.windows(5)) {
            *o -= delta4(w[0], w[1], w[2], w[3], w[4]);
        }
    }

    /// Nonlinear model tendency: `-d/dx((1+eta-beta)u)`, `-d/dx(u^2/2 + eta)` plus damping.
    pub fn forward_rhs(&self, y: &Pair, beta: &[f64]) -> Pair {
        let n = self.n;
        let mut out = Pair::zeros(n);
        let mut flux = vec![0.0; n];
        for i in 0..n {
            flux[i] = -(1.0 + y.eta[i] - beta[i]) * y.u[i];
        }
        self.ddx(&flux, &mut out.eta);
        for i in 0..n {
            flux[i] = -(0.5 * y.u[i] * y.u[i] + y.eta[i]);
        }
        self.ddx(&flux, &mut out.u);
        self.sub_damping(&y.eta, &mut out.eta);
        self.sub_damping(&y.u, &mut out.u);
        out
    }

    /// Linearised tendency about `base` acting on `p`, with optional bathymetry perturbation.
    pub fn tangent_rhs(&self, base: &Pair, beta: &[f64], p: &Pair, beta_hat: Option<&[f64]>) -> Pair {
        let n = self.n;
        let mut out = Pair::zeros(n);
        let mut flux = vec![0.0; n];
        for i in 0..n {
            let h = 1.0 + base.eta[i] - beta[i];
            let mut f = h * p.u[i] + base.u[i] * p.eta[i];
            if let Some(bh) = beta_hat {
                f -= bh[i] * base.u[i];
            }
            flux[i] = -f;
        }
        self.ddx(&flux, &mut out.eta);
        for i in 0..n {
            flux[i] = -(base.u[i] * p.u[i] + p.eta[i]);
        }
        self.ddx(&flux, &mut out.u);
        self.sub_damping(&p.eta, &mut out.eta);
        self.sub_damping(&p.u, &mut out.u);
        out
    }

    /// Adjoint tendency in backward time `tau = T - t`:
    /// `(u da/dx + db/dx, h da/dx + u db/dx)` minus damping, frozen at `coef`.
    pub fn adjoint_rhs(&self, coef: &Pair, beta: &[f64], lam: &Pair) -> Pair {
        let n = self.n;
        let da = self.ddx_vec(&lam.eta);
        let db = self.ddx_vec(&lam.u);
        let mut out = Pair::zeros(n);
        for i in 0..n {
            let h = 1.0 + coef.eta[i] - beta[i];
            out.eta[i] = coef.u[i] * da[i] + db[i];
            out.u[i] = h * da[i] + coef.u[i] * db[i];
        }
        self.sub_damping(&lam.eta, &mut out.eta);
        self.sub_damping(&lam.u, &mut out.u);
        out
    }

    /// Derivative of [`Ops::adjoint_rhs`] with respect to its frozen coefficients in the
    /// direction `(eta_hat, u_hat, beta_hat)`: `(u_hat da/dx, (eta_hat - beta_hat) da/dx + u_hat db/dx)`.
    pub fn adjoint_cross(&self, dcoef: &Pair, beta_hat: Option<&[f64]>, lam: &Pair) -> Pair {
        let n = self.n;
        let da = self.ddx_vec(&lam.eta);
        let db = self.ddx_vec(&lam.u);
        let mut out = Pair::zeros(n);
        for i in 0..n {
            let dh = dcoef.eta[i] - beta_hat.map_or(0.0, |b| b[i]);
            out.eta[i] = dcoef.u[i] * da[i];
            out.u[i] = dh * da[i] + dcoef.u[i] * db[i];
        }
        out
    }
}

/// Forward SSP-RK3 stage states `S0 = y`, `S1`, `S2` and the new level.
pub(crate) fn forward_stages(ops: &Ops, y: &Pair, beta: &[f64], dt: f64) -> ([Pair; 3], Pair) {
    let f0 = ops.forward_rhs(y, beta);
    let s1 = Pair::stage(0.0, y, 1.0, y, dt, &f0);
    let f1 = ops.forward_rhs(&s1, beta);
    let s2 = Pair::stage(0.75, y, 0.25, &s1, dt, &f1);
    let f2 = ops.forward_rhs(&s2, beta);
    let next = Pair::stage(1.0 / 3.0, y, 2.0 / 3.0, &s2, dt, &f2);
    ([y.clone(), s1, s2], next)
}
