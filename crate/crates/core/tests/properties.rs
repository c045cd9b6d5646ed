use proptest::prelude::*;
use swe_assim::adjoint::{solve_foa, AdjointForcing};
use swe_assim::domain::{inner_l2_space, inner_l2_spacetime_levels};
use swe_assim::io::format_real;
use swe_assim::solver::{mass, solve_forward, solve_tangent, ForwardProblem};
use swe_assim::{Field, Grid};

fn grid() -> Grid {
    Grid::new(1.0, 24, 0.03, 30).unwrap()
}

fn mode(g: &Grid, k: f64, phase: f64, amp: f64) -> Field {
    g.field_from_fn(|x| amp * (std::f64::consts::PI * k * x + phase).sin())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mass_is_conserved(amp in 0.0f64..0.15, center in -1.0f64..1.0, width in 0.08f64..0.4, bar in 0.0f64..0.2) {
        let g = grid();
        let phi = g.field_from_fn(|x| amp * (-((x - center) / width).powi(2)).exp());
        let beta = mode(&g, 1.0, 0.3, bar);
        let traj = solve_forward(&ForwardProblem::new(g.clone(), phi, beta).unwrap()).unwrap();
        let m0 = mass(&traj, 0).unwrap();
        for k in 0..g.n_levels() {
            prop_assert!((mass(&traj, k).unwrap() - m0).abs() <= 1e-10 * m0.abs().max(1.0));
        }
    }

    #[test]
    fn tangent_and_adjoint_are_dual(k1 in 1u32..5, k2 in 1u32..5, phase in 0.0f64..6.3, level in 0usize..31, bathy in proptest::bool::ANY) {
        let g = grid();
        let phi = mode(&g, 1.0, 0.0, 0.05);
        let beta = mode(&g, 2.0, 1.0, 0.05);
        let base = solve_forward(&ForwardProblem::new(g.clone(), phi, beta.clone()).unwrap()).unwrap();
        let mut fe = vec![g.zeros(); g.n_levels()];
        let mut fu = vec![g.zeros(); g.n_levels()];
        fe[level] = mode(&g, k1 as f64, phase, 1.0);
        fu[level] = mode(&g, k2 as f64, -phase, 1.0);
        let a = solve_foa(&base, &beta, &AdjointForcing::volumetric(fe.clone(), fu.clone())).unwrap();
        let d = mode(&g, k2 as f64, phase, 0.01);
        let (t, rhs) = if bathy {
            (solve_tangent(&base, &beta, &g.zeros(), Some(&d)).unwrap(), inner_l2_space(a.u_deta_dx_integral(), &d, &g).unwrap())
        } else {
            (solve_tangent(&base, &beta, &d, None).unwrap(), -inner_l2_space(&a.eta_initial(), &d, &g).unwrap())
        };
        let lhs = inner_l2_spacetime_levels(&fe, |k| t.eta(k).to_vec(), &g).unwrap()
            + inner_l2_spacetime_levels(&fu, |k| t.u(k).to_vec(), &g).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12 + 1e-10 * lhs.abs(), "{} vs {}", lhs, rhs);
    }

    #[test]
    fn csv_reals_round_trip(v in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
        prop_assert_eq!(format_real(v).parse::<f64>().unwrap(), v);
    }
}
