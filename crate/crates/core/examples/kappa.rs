//! Taylor-remainder checks of the gradient and of the Hessian-vector product.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use swe_assim::assimilate::{kappa_first_order, make_twin};
use swe_assim::hessian::{kappa_second_order, random_direction, HessianOperator};
use swe_assim::io::Recipe;
use swe_assim::{Control, Grid};

fn main() -> swe_assim::Result<()> {
    let grid = Grid::new(1.0, 64, 0.0125, 80)?;
    let hump = Recipe::Gaussian { amplitude: 0.1, center: 0.0, width: 0.1 }.build(&grid)?;
    let bar = Recipe::Gaussian { amplitude: 0.1, center: 0.3, width: 0.2 }.build(&grid)?;
    let stations: Vec<f64> = (0..12).map(|j| -0.95 + 0.16 * j as f64).collect();
    let problem = make_twin(&grid, &Control::bathymetry(bar), &hump, &stations, 0.0, 0)?;

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d1 = random_direction(&grid, &mut rng, 8).scaled(0.01);
    let d2 = random_direction(&grid, &mut rng, 8).scaled(0.01);
    let eps: Vec<f64> = (1..=10).map(|i| 10f64.powi(-i)).collect();
    let first = kappa_first_order(&problem, &problem.first_guess, &d1, &eps)?;
    let op = HessianOperator::new(problem.clone(), &problem.first_guess)?;
    let second = kappa_second_order(&op, &d1, &d2, &eps)?;
    println!("{:>8}  {:>12}  {:>12}", "eps", "kappa_1", "kappa_2");
    for ((e, k1), (_, k2)) in first.iter().zip(&second) {
        println!("{e:8.0e}  {k1:12.9}  {k2:12.9}");
    }
    Ok(())
}
