//! Which observations matter most for the forecast height at x = 0.4?

use swe_assim::assimilate::{descend_with, make_twin_with_layout, DescentOptions};
use swe_assim::io::Recipe;
use swe_assim::sensitivity::{sensitivity, PointHeight, SensitivityOptions};
use swe_assim::{Control, Grid, ObservationLayout};

fn main() -> swe_assim::Result<()> {
    let grid = Grid::new(1.0, 64, 0.0125, 128)?;
    let phi = Recipe::Gaussian { amplitude: 0.1, center: 0.0, width: 0.1 }.build(&grid)?;
    let bar = Recipe::Sandbar { height: 0.1, center: 0.3, width: 0.3 }.build(&grid)?;
    let stations: Vec<f64> = (0..8).map(|j| -0.9 + 0.2437 * j as f64).collect();
    let layout = ObservationLayout::strided(&grid, stations, 4, 4)?;
    let problem = make_twin_with_layout(&grid, &Control::bathymetry(bar), &phi, layout, 1e-3, 7)?;

    let optimum = descend_with(&problem, &DescentOptions { max_iters: 20_000, rel_tol: 1e-10, ..Default::default() })?;
    let s = sensitivity(&problem, &optimum.control, &PointHeight::terminal(0.4), &SensitivityOptions::default())?;
    println!("CG: {} iterations, residual {:.2e}", s.cg_iterations, s.cg_residual);

    let layout = problem.layout();
    for (j, x) in layout.positions().iter().enumerate() {
        let (t, v) = (0..layout.n_times())
            .map(|t| (t, s.dg_dm.get(j, t)))
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap();
        println!("station x = {x:+.3}: peak dG/dm = {v:+.4e} at t = {:.3}", grid.time(layout.levels()[t]));
    }
    Ok(())
}
