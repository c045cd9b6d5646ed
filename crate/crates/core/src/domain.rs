//! Grid, fields, trajectories and observations shared by every solver.
//!
//! The mesh is uniform, cell-centred and periodic on `[-L, L)`. Cell `i` sits
//! at `x_i = -L + (i + 1/2) dx`. Time levels are `t_k = k dt`, `k = 0..=n_steps`.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_CELLS: usize = 8;
pub const MAX_CFL: f64 = 0.9;
pub const DEFAULT_CFL: f64 = 0.5;
pub const DEFAULT_DISSIPATION: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    half_length: f64,
    n_cells: usize,
    dt: f64,
    n_steps: usize,
    c_cfl: f64,
    dissipation: f64,
}

impl Grid {
    pub fn new(half_length: f64, n_cells: usize, dt: f64, n_steps: usize) -> Result<Self> {
        Self::with_options(half_length, n_cells, dt, n_steps, DEFAULT_CFL, DEFAULT_DISSIPATION)
    }

    /// `dissipation` is the dimensionless coefficient `c` of the fourth-difference
    /// damping `-(c / dt) * delta^4`, i.e. `nu = c dx^4 / dt` in front of `d^4/dx^4`.
    pub fn with_options(
        half_length: f64,
        n_cells: usize,
        dt: f64,
        n_steps: usize,
        c_cfl: f64,
        dissipation: f64,
    ) -> Result<Self> {
        if !(half_length > 0.0 && half_length.is_finite()) {
            return Err(Error::InvalidGrid(format!("half length must be positive, got {half_length}")));
        }
        if n_cells < MIN_CELLS {
            return Err(Error::InvalidGrid(format!("need at least {MIN_CELLS} cells, got {n_cells}")));
        }
        if n_steps == 0 {
            return Err(Error::InvalidGrid("n_steps must be positive".into()));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidGrid(format!("dt must be positive, got {dt}")));
        }
        if !(c_cfl > 0.0 && c_cfl <= MAX_CFL) {
            return Err(Error::InvalidGrid(format!("c_cfl must lie in (0, {MAX_CFL}], got {c_cfl}")));
        }
        if !(dissipation >= 0.0 && dissipation.is_finite()) {
            return Err(Error::InvalidGrid(format!("dissipation must be non-negative, got {dissipation}")));
        }
        let dx = 2.0 * half_length / n_cells as f64;
        if dt > c_cfl * dx * (1.0 + 1e-12) {
            return Err(Error::InvalidGrid(format!(
                "dt = {dt} exceeds c_cfl * dx = {}",
                c_cfl * dx
            )));
        }
        Ok(Self { half_length, n_cells, dt, n_steps, c_cfl, dissipation })
    }

    /// Grid whose step count covers `horizon` with `dt = courant * dx` rounded down to an
    /// integer number of steps.
    pub fn for_horizon(half_length: f64, n_cells: usize, horizon: f64, courant: f64) -> Result<Self> {
        let dx = 2.0 * half_length / n_cells as f64;
        let n_steps = (horizon / (courant * dx)).ceil().max(1.0) as usize;
        Self::new(half_length, n_cells, horizon / n_steps as f64, n_steps)
    }

    pub fn half_length(&self) -> f64 {
        self.half_length
    }
    pub fn n_cells(&self) -> usize {
        self.n_cells
    }
    pub fn dx(&self) -> f64 {
        2.0 * self.half_length / self.n_cells as f64
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }
    pub fn n_levels(&self) -> usize {
        self.n_steps + 1
    }
    pub fn horizon(&self) -> f64 {
        self.dt * self.n_steps as f64
    }
    pub fn c_cfl(&self) -> f64 {
        self.c_cfl
    }
    pub fn dissipation(&self) -> f64 {
        self.dissipation
    }

    pub fn x(&self, i: usize) -> f64 {
        -self.half_length + (i as f64 + 0.5) * self.dx()
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.n_cells).map(|i| self.x(i)).collect()
    }

    pub fn time(&self, level: usize) -> f64 {
        level as f64 * self.dt
    }

    /// Trapezoid weight of a time level in `[0, T]`.
    pub fn time_weight(&self, level: usize) -> f64 {
        if level == 0 || level == self.n_steps {
            0.5 * self.dt
        } else {
            self.dt
        }
    }

    pub fn zeros(&self) -> Field {
        Field(vec![0.0; self.n_cells])
    }

    pub fn field_from_fn(&self, f: impl Fn(f64) -> f64) -> Field {
        Field((0..self.n_cells).map(|i| f(self.x(i))).collect())
    }

    pub(crate) fn check_field(&self, f: &[f64], what: &str) -> Result<()> {
        if f.len() != self.n_cells {
            return Err(Error::Alignment(format!(
                "{what} has {} entries, grid has {} cells",
                f.len(),
                self.n_cells
            )));
        }
        if let Some(i) = f.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("{what} has a non-finite entry at cell {i}")));
        }
        Ok(())
    }
}

/// Cell-centred samples of a function of `x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field(pub Vec<f64>);

impl Field {
    pub fn zeros(n: usize) -> Self {
        Field(vec![0.0; n])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn scaled(&self, alpha: f64) -> Field {
        Field(self.0.iter().map(|v| alpha * v).collect())
    }

    /// `self + alpha * other`
    pub fn add_scaled(&self, alpha: f64, other: &Field) -> Field {
        Field(self.0.iter().zip(&other.0).map(|(a, b)| a + alpha * b).collect())
    }

    pub fn axpy(&mut self, alpha: f64, other: &Field) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += alpha * b;
        }
    }

    pub fn norm_l2(&self, grid: &Grid) -> f64 {
        inner_l2_space_unchecked(&self.0, &self.0, grid.dx()).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

impl Deref for Field {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Field {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for Field {
    fn from(v: Vec<f64>) -> Self {
        Field(v)
    }
}

/// Space-time record of `(eta, u)` on every time level, stored row-major by level.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTrajectory {
    grid: Grid,
    eta: Vec<f64>,
    u: Vec<f64>,
}

impl StateTrajectory {
    pub fn zeros(grid: &Grid) -> Self {
        let len = grid.n_levels() * grid.n_cells();
        Self { grid: grid.clone(), eta: vec![0.0; len], u: vec![0.0; len] }
    }

    pub fn from_rows(grid: &Grid, eta: Vec<f64>, u: Vec<f64>) -> Result<Self> {
        let len = grid.n_levels() * grid.n_cells();
        if eta.len() != len || u.len() != len {
            return Err(Error::Alignment(format!(
                "trajectory arrays must hold {len} values, got {} and {}",
                eta.len(),
                u.len()
            )));
        }
        Ok(Self { grid: grid.clone(), eta, u })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn n_levels(&self) -> usize {
        self.grid.n_levels()
    }

    pub fn eta(&self, level: usize) -> &[f64] {
        let n = self.grid.n_cells();
        &self.eta[level * n..(level + 1) * n]
    }

    pub fn u(&self, level: usize) -> &[f64] {
        let n = self.grid.n_cells();
        &self.u[level * n..(level + 1) * n]
    }

    pub fn eta_mut(&mut self, level: usize) -> &mut [f64] {
        let n = self.grid.n_cells();
        &mut self.eta[level * n..(level + 1) * n]
    }

    pub fn u_mut(&mut self, level: usize) -> &mut [f64] {
        let n = self.grid.n_cells();
        &mut self.u[level * n..(level + 1) * n]
    }

    pub fn eta_field(&self, level: usize) -> Field {
        Field(self.eta(level).to_vec())
    }

    pub fn u_field(&self, level: usize) -> Field {
        Field(self.u(level).to_vec())
    }

    pub fn eta_all(&self) -> &[f64] {
        &self.eta
    }

    pub fn u_all(&self) -> &[f64] {
        &self.u
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            grid: self.grid.clone(),
            eta: self.eta.iter().map(|v| alpha * v).collect(),
            u: self.u.iter().map(|v| alpha * v).collect(),
        }
    }

    /// Largest absolute entry over both components and all levels.
    pub fn max_abs(&self) -> f64 {
        self.eta.iter().chain(&self.u).fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Largest absolute difference to another trajectory on the same grid.
    pub fn max_abs_diff(&self, other: &StateTrajectory) -> f64 {
        self.eta
            .iter()
            .zip(&other.eta)
            .chain(self.u.iter().zip(&other.u))
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Station positions and the solver time levels at which they are sampled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationLayout {
    positions: Vec<f64>,
    levels: Vec<usize>,
    #[serde(skip)]
    stencils: Vec<Stencil>,
    #[serde(skip)]
    weights: Vec<f64>,
}

/// Two-point linear interpolation stencil on the periodic mesh.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    pub left: usize,
    pub right: usize,
    pub w_left: f64,
    pub w_right: f64,
}

impl Stencil {
    pub fn at(grid: &Grid, x: f64) -> Result<Self> {
        let l = grid.half_length();
        if !(x >= -l && x < l) {
            return Err(Error::Domain(format!("position {x} lies outside [-{l}, {l})")));
        }
        let n = grid.n_cells() as isize;
        let s = (x + l) / grid.dx() - 0.5;
        let base = s.floor();
        let frac = s - base;
        let left = (base as isize).rem_euclid(n) as usize;
        let right = (base as isize + 1).rem_euclid(n) as usize;
        Ok(Self { left, right, w_left: 1.0 - frac, w_right: frac })
    }

    pub fn sample(&self, v: &[f64]) -> f64 {
        self.w_left * v[self.left] + self.w_right * v[self.right]
    }

    pub fn scatter(&self, value: f64, out: &mut [f64]) {
        out[self.left] += self.w_left * value;
        out[self.right] += self.w_right * value;
    }
}

impl ObservationLayout {
    pub fn new(grid: &Grid, positions: Vec<f64>, levels: Vec<usize>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Domain("observation layout needs at least one station".into()));
        }
        if levels.is_empty() {
            return Err(Error::Alignment("observation layout needs at least one time level".into()));
        }
        let l = grid.half_length();
        for w in positions.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Domain("station positions must be strictly increasing".into()));
            }
        }
        if let Some(&x) = positions.iter().find(|&&x| !(x > -l && x < l)) {
            return Err(Error::Domain(format!("station {x} is not strictly inside (-{l}, {l})")));
        }
        for w in levels.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Alignment("observation times must be strictly increasing".into()));
            }
        }
        if let Some(&k) = levels.iter().find(|&&k| k > grid.n_steps()) {
            return Err(Error::Alignment(format!(
                "observation level {k} is beyond the last solver level {}",
                grid.n_steps()
            )));
        }
        let stencils = positions.iter().map(|&x| Stencil::at(grid, x)).collect::<Result<Vec<_>>>()?;
        let weights = trapezoid_weights(&levels.iter().map(|&k| grid.time(k)).collect::<Vec<_>>(), grid.dt());
        Ok(Self { positions, levels, stencils, weights })
    }

    /// Observation times given in physical units; each must coincide with a solver level.
    pub fn from_times(grid: &Grid, positions: Vec<f64>, times: &[f64]) -> Result<Self> {
        let levels = times
            .iter()
            .map(|&t| {
                let k = (t / grid.dt()).round();
                if k < 0.0 || (k * grid.dt() - t).abs() > 1e-9 * grid.dt().max(t.abs()) {
                    Err(Error::Alignment(format!("time {t} is not on a solver level")))
                } else {
                    Ok(k as usize)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(grid, positions, levels)
    }

    /// Levels `start, start + stride, ...` up to the final level.
    pub fn strided(grid: &Grid, positions: Vec<f64>, start: usize, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Alignment("stride must be positive".into()));
        }
        let levels = (start..=grid.n_steps()).step_by(stride).collect();
        Self::new(grid, positions, levels)
    }

    /// `count` stations evenly spaced at the cell-aligned offsets `-L + (j + 1/2) 2L / count`.
    pub fn uniform_stations(grid: &Grid, count: usize) -> Vec<f64> {
        let l = grid.half_length();
        let spacing = 2.0 * l / count as f64;
        (0..count).map(|j| -l + (j as f64 + 0.5) * spacing).collect()
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }
    pub fn levels(&self) -> &[usize] {
        &self.levels
    }
    pub fn n_obs(&self) -> usize {
        self.positions.len()
    }
    pub fn n_times(&self) -> usize {
        self.levels.len()
    }
    pub fn stencils(&self) -> &[Stencil] {
        &self.stencils
    }

    /// Trapezoid weights of the retained sample times.
    pub fn time_weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn zeros(&self) -> ObsArray {
        ObsArray::zeros(self.n_obs(), self.n_times())
    }

    /// Rebuilds cached stencils after deserialisation.
    pub fn rebind(&self, grid: &Grid) -> Result<Self> {
        Self::new(grid, self.positions.clone(), self.levels.clone())
    }
}

fn trapezoid_weights(times: &[f64], fallback: f64) -> Vec<f64> {
    match times.len() {
        0 => vec![],
        1 => vec![fallback],
        n => (0..n)
            .map(|k| {
                let left = if k > 0 { times[k] - times[k - 1] } else { 0.0 };
                let right = if k + 1 < n { times[k + 1] - times[k] } else { 0.0 };
                0.5 * (left + right)
            })
            .collect(),
    }
}

/// `N_obs x n_times` array, station-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsArray {
    n_obs: usize,
    n_times: usize,
    data: Vec<f64>,
}

impl ObsArray {
    pub fn zeros(n_obs: usize, n_times: usize) -> Self {
        Self { n_obs, n_times, data: vec![0.0; n_obs * n_times] }
    }

    pub fn from_vec(n_obs: usize, n_times: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_obs * n_times {
            return Err(Error::Alignment(format!(
                "expected {} observation values, got {}",
                n_obs * n_times,
                data.len()
            )));
        }
        Ok(Self { n_obs, n_times, data })
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }
    pub fn n_times(&self) -> usize {
        self.n_times
    }
    pub fn get(&self, station: usize, time: usize) -> f64 {
        self.data[station * self.n_times + time]
    }
    pub fn set(&mut self, station: usize, time: usize, v: f64) {
        self.data[station * self.n_times + time] = v;
    }
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn zip_map(&self, other: &ObsArray, f: impl Fn(f64, f64) -> f64) -> ObsArray {
        ObsArray {
            n_obs: self.n_obs,
            n_times: self.n_times,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn scaled(&self, alpha: f64) -> ObsArray {
        ObsArray { n_obs: self.n_obs, n_times: self.n_times, data: self.data.iter().map(|v| alpha * v).collect() }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn euclidean_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn check_layout(&self, layout: &ObservationLayout) -> Result<()> {
        if self.n_obs != layout.n_obs() || self.n_times != layout.n_times() {
            return Err(Error::Alignment(format!(
                "observation array is {}x{}, layout is {}x{}",
                self.n_obs,
                self.n_times,
                layout.n_obs(),
                layout.n_times()
            )));
        }
        Ok(())
    }
}

/// Layout plus measured heights `y(x_j, t_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub layout: ObservationLayout,
    pub heights: ObsArray,
}

impl ObservationSet {
    pub fn new(layout: ObservationLayout, heights: ObsArray) -> Result<Self> {
        heights.check_layout(&layout)?;
        if heights.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("observed heights must be finite".into()));
        }
        Ok(Self { layout, heights })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlKind {
    #[serde(alias = "ic")]
    InitialCondition,
    #[serde(alias = "bathy")]
    Bathymetry,
}

impl std::fmt::Display for ControlKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ControlKind::InitialCondition => f.write_str("ic"),
            ControlKind::Bathymetry => f.write_str("bathymetry"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Control {
    pub kind: ControlKind,
    pub field: Field,
}

impl Control {
    pub fn initial_condition(field: Field) -> Self {
        Self { kind: ControlKind::InitialCondition, field }
    }
    pub fn bathymetry(field: Field) -> Self {
        Self { kind: ControlKind::Bathymetry, field }
    }
}

/// Linear interpolation of `eta` at every station and observed level (the discrete `H`).
pub fn observe(traj: &StateTrajectory, layout: &ObservationLayout) -> Result<ObsArray> {
    if let Some(&k) = layout.levels().iter().find(|&&k| k >= traj.n_levels()) {
        return Err(Error::Alignment(format!("observation level {k} is not a trajectory level")));
    }
    Ok(observe_rows(|k| traj.eta(k), layout))
}

pub(crate) fn observe_rows<'a>(row: impl Fn(usize) -> &'a [f64], layout: &ObservationLayout) -> ObsArray {
    let mut out = layout.zeros();
    for (t, &k) in layout.levels().iter().enumerate() {
        let eta = row(k);
        for (j, s) in layout.stencils().iter().enumerate() {
            out.set(j, t, s.sample(eta));
        }
    }
    out
}

/// Transpose of [`observe`] with respect to the space-time inner product: the returned
/// per-level fields `f` satisfy `<observe(w), r>_obs = <w_eta, f>_spacetime`.
pub fn inject(residual: &ObsArray, layout: &ObservationLayout, grid: &Grid) -> Result<Vec<Field>> {
    residual.check_layout(layout)?;
    let mut out = vec![grid.zeros(); grid.n_levels()];
    let weights = layout.time_weights();
    for (t, &k) in layout.levels().iter().enumerate() {
        if k > grid.n_steps() {
            return Err(Error::Alignment(format!("observation level {k} is beyond the grid")));
        }
        let scale = weights[t] / (grid.time_weight(k) * grid.dx());
        for (j, s) in layout.stencils().iter().enumerate() {
            s.scatter(scale * residual.get(j, t), &mut out[k]);
        }
    }
    Ok(out)
}

pub fn inner_l2_space(a: &[f64], b: &[f64], grid: &Grid) -> Result<f64> {
    if a.len() != grid.n_cells() || b.len() != grid.n_cells() {
        return Err(Error::Alignment(format!(
            "inner product of fields with {} and {} entries on a {}-cell grid",
            a.len(),
            b.len(),
            grid.n_cells()
        )));
    }
    Ok(inner_l2_space_unchecked(a, b, grid.dx()))
}

pub(crate) fn inner_l2_space_unchecked(a: &[f64], b: &[f64], dx: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() * dx
}

/// Trapezoid in time, rectangle in space, summed over both components.
pub fn inner_l2_spacetime(a: &StateTrajectory, b: &StateTrajectory) -> Result<f64> {
    if a.grid() != b.grid() {
        return Err(Error::Alignment("trajectories live on different grids".into()));
    }
    let g = a.grid();
    let dx = g.dx();
    Ok((0..g.n_levels())
        .map(|k| {
            g.time_weight(k)
                * (inner_l2_space_unchecked(a.eta(k), b.eta(k), dx) + inner_l2_space_unchecked(a.u(k), b.u(k), dx))
        })
        .sum())
}

/// Space-time inner product of per-level scalar fields against one trajectory component.
pub fn inner_l2_spacetime_levels(a: &[Field], b: impl Fn(usize) -> Vec<f64>, grid: &Grid) -> Result<f64> {
    if a.len() != grid.n_levels() {
        return Err(Error::Alignment(format!("expected {} levels, got {}", grid.n_levels(), a.len())));
    }
    let dx = grid.dx();
    Ok(a.iter().enumerate().map(|(k, f)| grid.time_weight(k) * inner_l2_space_unchecked(f, &b(k), dx)).sum())
}

/// Weighted observation-space inner product `sum_k w_k sum_j a_jk b_jk`.
pub fn inner_obs(a: &ObsArray, b: &ObsArray, layout: &ObservationLayout) -> Result<f64> {
    a.check_layout(layout)?;
    b.check_layout(layout)?;
    let w = layout.time_weights();
    let mut s = 0.0;
    for j in 0..a.n_obs() {
        for (t, wt) in w.iter().enumerate() {
            s += wt * a.get(j, t) * b.get(j, t);
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn grid(n: usize) -> Grid {
        Grid::for_horizon(1.0, n, 0.5, 0.4).unwrap()
    }

    #[test]
    fn grid_invariants_are_enforced() {
        assert!(Grid::new(1.0, 4, 0.01, 10).is_err());
        assert!(Grid::new(1.0, 16, 0.2, 10).is_err());
        assert!(Grid::with_options(1.0, 16, 0.01, 10, 0.95, 1e-3).is_err());
        let g = Grid::new(1.0, 16, 0.05, 20).unwrap();
        assert!((g.dx() - 0.125).abs() < 1e-15);
        assert!((g.horizon() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn observe_zero_field_is_zero() {
        let g = grid(16);
        let traj = StateTrajectory::zeros(&g);
        let layout = ObservationLayout::strided(&g, vec![-0.3, 0.1, 0.7], 0, 1).unwrap();
        assert_eq!(observe(&traj, &layout).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn observe_at_cell_centre_and_midpoint() {
        let g = grid(16);
        let mut traj = StateTrajectory::zeros(&g);
        traj.eta_mut(0)[5] = 1.0;
        traj.eta_mut(0)[6] = 3.0;
        let centre = g.x(5);
        let mid = 0.5 * (g.x(5) + g.x(6));
        let layout = ObservationLayout::new(&g, vec![centre, mid], vec![0]).unwrap();
        let obs = observe(&traj, &layout).unwrap();
        assert_eq!(obs.get(0, 0), 1.0);
        assert!((obs.get(1, 0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn observation_layout_errors() {
        let g = grid(16);
        assert!(matches!(ObservationLayout::new(&g, vec![1.5], vec![0]), Err(Error::Domain(_))));
        assert!(matches!(ObservationLayout::new(&g, vec![0.2, 0.1], vec![0]), Err(Error::Domain(_))));
        assert!(matches!(
            ObservationLayout::new(&g, vec![0.1], vec![g.n_steps() + 1]),
            Err(Error::Alignment(_))
        ));
        assert!(matches!(
            ObservationLayout::from_times(&g, vec![0.1], &[0.5 * g.dt()]),
            Err(Error::Alignment(_))
        ));
        assert!(matches!(Stencil::at(&g, 1.0), Err(Error::Domain(_))));
        let layout = ObservationLayout::new(&g, vec![0.1], vec![0, 1]).unwrap();
        assert!(matches!(inject(&ObsArray::zeros(2, 2), &layout, &g), Err(Error::Alignment(_))));
    }

    #[test]
    fn inject_single_nodal_observation() {
        let g = grid(16);
        let layout = ObservationLayout::new(&g, vec![g.x(3)], vec![0, 1, 2]).unwrap();
        let mut r = layout.zeros();
        r.set(0, 1, 1.0);
        let f = inject(&r, &layout, &g).unwrap();
        for (k, field) in f.iter().enumerate() {
            for (i, v) in field.iter().enumerate() {
                let expect = if k == 1 && i == 3 {
                    // interior level with full dt weight both in obs and state quadrature
                    1.0 / g.dx()
                } else {
                    0.0
                };
                assert!((v - expect).abs() < 1e-12, "level {k} cell {i}: {v}");
            }
        }
        assert!(inject(&layout.zeros(), &layout, &g).unwrap().iter().all(|f| f.max_abs() == 0.0));
    }

    #[test]
    fn observe_inject_duality() {
        for &n in &[16usize, 64] {
            let g = grid(n);
            let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
            let positions = vec![-0.83, -0.41, 0.02, 0.377, 0.91];
            let layout = ObservationLayout::strided(&g, positions, 1, 3).unwrap();
            let len = g.n_levels() * n;
            let w = StateTrajectory::from_rows(
                &g,
                (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let r = ObsArray::from_vec(
                layout.n_obs(),
                layout.n_times(),
                (0..layout.n_obs() * layout.n_times()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let lhs = inner_obs(&observe(&w, &layout).unwrap(), &r, &layout).unwrap();
            let forcing = inject(&r, &layout, &g).unwrap();
            let rhs = inner_l2_spacetime_levels(&forcing, |k| w.eta(k).to_vec(), &g).unwrap();
            let scale = lhs.abs().max(rhs.abs()).max(1.0);
            assert!((lhs - rhs).abs() <= 1e-12 * scale, "n={n}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn inner_products() {
        let g = grid(16);
        let one = g.field_from_fn(|_| 1.0);
        assert!((inner_l2_space(&one, &one, &g).unwrap() - 2.0).abs() < 1e-14);
        let s = g.field_from_fn(|x| (PI * x).sin());
        let c = g.field_from_fn(|x| (PI * x).cos());
        assert!(inner_l2_space(&s, &c, &g).unwrap().abs() < 1e-12);
        assert!(inner_l2_space(&s, &[0.0; 3], &g).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..16).map(|_| rng.gen()).collect();
        let b: Vec<f64> = (0..16).map(|_| rng.gen()).collect();
        let mut oracle = 0.0;
        for i in 0..16 {
            oracle += a[i] * b[i] * g.dx();
        }
        assert!((inner_l2_space(&a, &b, &g).unwrap() - oracle).abs() <= 1e-14 * oracle.abs().max(1.0));
    }

    #[test]
    fn spacetime_inner_product() {
        let g = grid(16);
        let len = g.n_levels() * 16;
        let ones = StateTrajectory::from_rows(&g, vec![1.0; len], vec![0.0; len]).unwrap();
        let expect = 2.0 * g.half_length() * g.horizon();
        assert!((inner_l2_spacetime(&ones, &ones).unwrap() - expect).abs() < 1e-12);
        let zero = StateTrajectory::zeros(&g);
        assert_eq!(inner_l2_spacetime(&ones, &zero).unwrap(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rand_traj = |rng: &mut ChaCha8Rng| {
            StateTrajectory::from_rows(
                &g,
                (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap()
        };
        let a = rand_traj(&mut rng);
        let b = rand_traj(&mut rng);
        let mut oracle = 0.0;
        for k in 0..g.n_levels() {
            let w = if k == 0 || k == g.n_steps() { 0.5 } else { 1.0 } * g.dt();
            for i in 0..16 {
                oracle += w * g.dx() * (a.eta(k)[i] * b.eta(k)[i] + a.u(k)[i] * b.u(k)[i]);
            }
        }
        assert!((inner_l2_spacetime(&a, &b).unwrap() - oracle).abs() < 1e-13);
    }

    #[test]
    fn strided_layout_weights_are_trapezoid() {
        let g = Grid::new(1.0, 16, 0.05, 8).unwrap();
        let layout = ObservationLayout::strided(&g, vec![0.0], 0, 2).unwrap();
        assert_eq!(layout.levels(), &[0, 2, 4, 6, 8]);
        let w = layout.time_weights();
        assert!((w[0] - 0.05).abs() < 1e-15 && (w[2] - 0.1).abs() < 1e-15 && (w[4] - 0.05).abs() < 1e-15);
        assert!((w.iter().sum::<f64>() - g.horizon()).abs() < 1e-14);
    }

    mod props {
        use super::*;
        use proptest::prelude::{prop_assert, proptest};

        proptest! {
            #[test]
            fn observe_is_linear(alpha in -3.0f64..3.0, seed in 0u64..1000) {
                let g = grid(16);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let len = g.n_levels() * 16;
                let mut mk = || StateTrajectory::from_rows(
                    &g,
                    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    vec![0.0; len],
                ).unwrap();
                let w1 = mk();
                let w2 = mk();
                let combo = StateTrajectory::from_rows(
                    &g,
                    w1.eta_all().iter().zip(w2.eta_all()).map(|(a, b)| alpha * a + b).collect(),
                    vec![0.0; len],
                ).unwrap();
                let layout = ObservationLayout::strided(&g, vec![-0.77, 0.05, 0.5], 0, 2).unwrap();
                let lhs = observe(&combo, &layout).unwrap();
                let o1 = observe(&w1, &layout).unwrap();
                let o2 = observe(&w2, &layout).unwrap();
                for (i, v) in lhs.as_slice().iter().enumerate() {
                    let rhs = alpha * o1.as_slice()[i] + o2.as_slice()[i];
                    prop_assert!((v - rhs).abs() <= 1e-14 * (1.0 + rhs.abs()) * 4.0);
                }
            }
        }
    }
}
