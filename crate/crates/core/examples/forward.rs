//! Propagate a Gaussian hump over a sandbar and report mass conservation.

use swe_assim::io::Recipe;
use swe_assim::solver::{mass, solve_forward, ForwardProblem};
use swe_assim::Grid;

fn main() -> swe_assim::Result<()> {
    let grid = Grid::for_horizon(1.0, 128, 1.0, 0.4)?;
    let phi = Recipe::Gaussian { amplitude: 0.1, center: 0.0, width: 0.1 }.build(&grid)?;
    let beta = Recipe::Sandbar { height: 0.2, center: 0.5, width: 0.3 }.build(&grid)?;
    let traj = solve_forward(&ForwardProblem::new(grid.clone(), phi, beta)?)?;

    let m0 = mass(&traj, 0)?;
    for k in (0..grid.n_levels()).step_by(grid.n_steps() / 5) {
        let eta = traj.eta_field(k);
        println!("t = {:.3}  max|eta| = {:.5}  mass drift = {:.2e}", grid.time(k), eta.max_abs(), mass(&traj, k)? - m0);
    }
    Ok(())
}
