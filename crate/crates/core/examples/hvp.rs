//! Hessian symmetry and a CG solve with the second-order adjoint.

use swe_assim::assimilate::make_twin;
use swe_assim::hessian::{solve_hnu_f, symmetry_check, HessianOperator};
use swe_assim::io::Recipe;
use swe_assim::{Control, Grid};

fn main() -> swe_assim::Result<()> {
    let grid = Grid::new(1.0, 64, 0.0125, 128)?;
    let hump = Recipe::Gaussian { amplitude: 0.1, center: 0.0, width: 0.1 }.build(&grid)?;
    let stations: Vec<f64> = (0..8).map(|j| -0.9 + 0.2437 * j as f64).collect();
    let problem = make_twin(&grid, &Control::initial_condition(hump.clone()), &grid.zeros(), &stations, 0.0, 0)?;

    let op = HessianOperator::new(problem, &Control::initial_condition(hump))?.with_tikhonov(1e-4)?;
    println!("max relative asymmetry: {:.2e}", symmetry_check(&op, 5, 3)?);

    let f = grid.field_from_fn(|x| (-(x / 0.2f64).powi(2)).exp());
    let cg = solve_hnu_f(&op, &f, 1e-8, 500)?;
    for (i, r) in cg.residual_history.iter().enumerate().step_by(10) {
        println!("cg {i:4}  relative residual {r:.3e}");
    }
    println!("{} iterations, |nu| = {:.4e}", cg.iterations, cg.nu.norm_l2(&grid));
    Ok(())
}
