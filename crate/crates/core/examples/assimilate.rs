//! Twin experiment: recover an initial hump from noisy tide-gauge records.

use swe_assim::assimilate::{descend_with, make_twin_with_layout, DescentOptions};
use swe_assim::io::Recipe;
use swe_assim::{Control, Grid, ObservationLayout};

fn main() -> swe_assim::Result<()> {
    let grid = Grid::new(1.0, 64, 0.0125, 128)?;
    let truth = Recipe::Gaussian { amplitude: 0.1, center: 0.0, width: 0.1 }.build(&grid)?;
    let stations: Vec<f64> = (0..8).map(|j| -0.9 + 0.2437 * j as f64).collect();
    let layout = ObservationLayout::strided(&grid, stations, 4, 4)?;
    let problem =
        make_twin_with_layout(&grid, &Control::initial_condition(truth.clone()), &grid.zeros(), layout, 1e-3, 7)?;

    let report = descend_with(&problem, &DescentOptions { max_iters: 500, rel_tol: 1e-8, ..Default::default() })?;
    for it in report.iterates.iter().step_by(25) {
        println!("{:4}  J = {:.6e}  |grad J| = {:.3e}", it.iteration, it.cost, it.grad_norm);
    }
    let err = report.control.field.add_scaled(-1.0, &truth).norm_l2(&grid);
    println!("converged: {}  error: {:.3e} (truth norm {:.3e})", report.converged, err, truth.norm_l2(&grid));
    Ok(())
}
