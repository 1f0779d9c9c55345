use std::f64::consts::PI;

use parabolic::field::{discrete_gradient, lp_norm, Field, Grid, GridSpec, Rank};
use parabolic::pde::*;

fn heat_error(cells: usize) -> f64 {
    let h = 1.0 / cells as f64;
    let tau = h * h;
    let steps = (0.1 / tau).round() as usize;
    let g = Grid::new(GridSpec::new(1, 1, vec![1.0], steps as f64 * tau, h, tau)).unwrap();
    let initial: Vec<f64> = (0..cells).map(|i| (PI * g.x_center(0, i)).sin()).collect();
    let data = ProblemData { initial: Some(initial), ..ProblemData::zero(&g) };
    let u = solve_linear(&LinearTensor::constant(&g, 1.0).unwrap(), &data, &SolverConfig::default()).unwrap().u;
    // the value in time cell k is the state at the end of step k
    let exact = Field::from_fn(&g, Rank::Vector(1), |x, t, out| {
        out[0] = (PI * x[0]).sin() * (-PI * PI * (t + 0.5 * tau)).exp()
    });
    lp_norm(&u.zip_map(&exact, |a, b| a - b).unwrap(), 2.0).unwrap()
}

#[test]
fn manufactured_heat_solution_converges_at_second_order() {
    let e: Vec<f64> = [8, 16, 32, 64].iter().map(|&c| heat_error(c)).collect();
    for w in e.windows(2) {
        let ratio = w[0] / w[1];
        assert!((3.0..=5.0).contains(&ratio), "errors {e:?}");
    }
}

fn spiky(g: &Grid, scale: f64) -> Field {
    let mass = mollified_point_mass(g, &[0.4, 0.6], 0.05, 2.0 * g.h(), 1.0).unwrap();
    let n = g.n();
    let mut f = Field::zeros(g, Rank::Matrix(n, g.components()));
    for c in 0..g.cells() {
        let m = mass.values()[c] * scale;
        for (i, v) in f.at_mut(c).iter_mut().enumerate() {
            *v = m * (1.0 + i as f64);
        }
    }
    f
}

#[test]
fn linear_solver_is_exactly_linear() {
    for n in [1, 2] {
        let g = Grid::new(GridSpec::uniform(n, 2, 16, 1.0, 16, 1.0 / 16.0)).unwrap();
        let f = spiky(&g, 1.0);
        let coeff = Field::scalar_from_fn(&g, |x, t| 1.0 + 0.5 * (3.0 * x[0] + t).sin().powi(2));
        let a = LinearTensor::new(coeff).unwrap();
        let cfg = SolverConfig::default();
        let u1 = solve_linear(&a, &ProblemData::homogeneous(f.clone()), &cfg).unwrap().u;
        let u2 = solve_linear(&a, &ProblemData::homogeneous(f.scaled(2.0)), &cfg).unwrap().u;
        assert_eq!(u1.scaled(2.0), u2, "n={n}");
    }
}

#[test]
fn constant_law_matches_linear_solver_in_one_iteration() {
    let g = Grid::new(GridSpec::uniform(2, 1, 8, 1.0, 8, 1.0 / 16.0)).unwrap();
    let data = ProblemData::homogeneous(spiky(&g, 3.0));
    let cfg = SolverConfig::default();
    let lin = solve_linear(&LinearTensor::constant(&g, 1.0).unwrap(), &data, &cfg).unwrap();
    let non = solve_nonlinear(&Law::Linear { nu: 1.0 }, &data, &cfg).unwrap();
    assert_eq!(lin.u, non.u);
    assert!(non.iterations.iter().all(|&i| i == 1));
}

#[test]
fn zero_forcing_gives_zero_for_power_laws() {
    let g = Grid::new(GridSpec::uniform(1, 1, 8, 1.0, 8, 1.0 / 64.0)).unwrap();
    let law = Law::MaxPower { p: 1.5, nu_inf: 1.0, cap: 1e3 };
    let s = solve_nonlinear(&law, &ProblemData::zero(&g), &SolverConfig::default()).unwrap();
    assert!(s.converged && s.u.values().iter().all(|&v| v == 0.0));
}

#[test]
fn nonlinear_solve_converges_with_small_residual() {
    let g = Grid::new(GridSpec::uniform(2, 1, 12, 1.0, 12, 1.0 / 144.0)).unwrap();
    let law = Law::MinPower { p: 3.0, nu_inf: 1.0 };
    let s = solve_nonlinear(&law, &ProblemData::homogeneous(spiky(&g, 5.0)), &SolverConfig::default()).unwrap();
    assert!(s.converged, "{:?}", s.iterations);
    assert!(s.residual < 1e-10, "{}", s.residual);
}

#[test]
fn two_initializations_agree() {
    let g = Grid::new(GridSpec::uniform(1, 2, 16, 1.0, 16, 1.0 / 256.0)).unwrap();
    let law = Law::MinPower { p: 2.5, nu_inf: 1.0 };
    let data = ProblemData::homogeneous(spiky(&g, 10.0));
    let cfg = SolverConfig::default();
    let a = solve_nonlinear(&law, &data, &cfg).unwrap();
    let guess = Field::from_fn(&g, Rank::Vector(2), |x, t, o| o.fill((7.0 * x[0] + 3.0 * t).cos()));
    let b = solve_nonlinear_from(&law, &data, &cfg, Some(&guess)).unwrap();
    let d = lp_norm(&a.u.zip_map(&b.u, |x, y| x - y).unwrap(), 2.0).unwrap();
    assert!(d <= 1e-8 * lp_norm(&a.u, 2.0).unwrap());
}

#[test]
fn lift_reproduces_heat_flow_boundary_data() {
    // g = x + t solves the heat equation with flux F = grad g exactly
    let g = Grid::new(GridSpec::uniform(1, 1, 16, 1.0, 16, 1.0 / 16.0)).unwrap();
    let tau = g.tau();
    let gl = Field::from_fn(&g, Rank::Vector(1), |x, t, o| o[0] = x[0] * (1.0 + t + 0.5 * tau));
    let flux = discrete_gradient(&gl).unwrap();
    let g0: Vec<f64> = (0..16).map(|i| g.x_center(0, i)).collect();
    let lift = Lift { g0, g: gl.clone(), flux };
    assert!(representation_residual(&lift).unwrap() > 1e-3);
    let steady = Field::from_fn(&g, Rank::Vector(1), |x, _, o| o[0] = 2.0 * x[0] - 1.0);
    let lift = Lift {
        g0: (0..16).map(|i| 2.0 * g.x_center(0, i) - 1.0).collect(),
        flux: discrete_gradient(&steady).unwrap(),
        g: steady.clone(),
    };
    assert_eq!(representation_residual(&lift).unwrap(), 0.0);
    let s = lift_inhomogeneous(&Law::Linear { nu: 1.0 }, &lift, &ProblemData::zero(&g), &SolverConfig::default(), 1e-12)
        .unwrap();
    assert_eq!(s.u, steady);
}

#[test]
fn residual_gate_rejects_inconsistent_lift() {
    let g = Grid::new(GridSpec::uniform(1, 1, 8, 1.0, 8, 1.0 / 8.0)).unwrap();
    let gl = Field::from_fn(&g, Rank::Vector(1), |_, t, o| o[0] = t);
    let lift = Lift { g0: vec![0.0; 8], g: gl, flux: Field::zeros(&g, Rank::Matrix(1, 1)) };
    let err = lift_inhomogeneous(&Law::Linear { nu: 1.0 }, &lift, &ProblemData::zero(&g), &SolverConfig::default(), 1e-10);
    assert!(matches!(err, Err(parabolic::Error::ResidualGate { .. })));
}

#[test]
fn measure_decomposition_matches_direct_source_solve() {
    let g = Grid::new(GridSpec::uniform(2, 1, 16, 1.0, 16, 1.0 / 64.0)).unwrap();
    let mu = mollified_point_mass(&g, &[0.5, 0.5], 0.1, 2.0 * g.h(), 1.0).unwrap();
    let law = Law::Linear { nu: 2.0 };
    let demo = measure_rhs_demo(&law, &mu, &SolverConfig::default()).unwrap();
    let data = ProblemData { source: Some(mu.clone().with_rank(Rank::Vector(1)).unwrap()), ..ProblemData::zero(&g) };
    let direct = solve_linear(&LinearTensor::constant(&g, 2.0).unwrap(), &data, &SolverConfig::default()).unwrap();
    let d = lp_norm(&demo.u.zip_map(&direct.u, |a, b| a - b).unwrap(), 2.0).unwrap();
    assert!(d <= 1e-10 * lp_norm(&direct.u, 2.0).unwrap(), "{d}");
    let zero = measure_rhs_demo(&law, &mu.scaled(0.0), &SolverConfig::default()).unwrap();
    assert!(zero.u.values().iter().all(|&v| v == 0.0));
}

#[test]
fn large_two_dimensional_solve_is_fast() {
    let g = Grid::new(GridSpec::uniform(2, 1, 64, 1.0, 128, 0.5)).unwrap();
    let start = std::time::Instant::now();
    let s = solve_linear(&LinearTensor::constant(&g, 1.0).unwrap(), &ProblemData::homogeneous(spiky(&g, 1.0)), &SolverConfig::default())
        .unwrap();
    assert!(s.residual < 1e-9, "{}", s.residual);
    assert!(start.elapsed().as_secs_f64() < 30.0);
}
