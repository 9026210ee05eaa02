use mfsmp::adjoint_bsde::{hamiltonian, solve_bsde, BsdeOptions, HamiltonianPoint};
use mfsmp::adjoint_mall::FrozenMeans;
use mfsmp::forward::simulate_state;
use mfsmp::lq::RiccatiOracle;
use mfsmp::model::{Coefficient, ControlPolicy, ControlSet, LqSpec, ModelSpec};
use mfsmp::paths::{generate_paths, LevyMeasure, Mark, TimeGrid};
use mfsmp::stats::{mean, mean_se};

fn run(
    model: &ModelSpec,
    steps: usize,
    n: usize,
    seed: u64,
) -> (TimeGrid, mfsmp::adjoint_bsde::BsdeSolution) {
    let grid = TimeGrid::new(1.0, steps).unwrap();
    let paths = generate_paths(grid, &model.levy, n, seed).unwrap();
    let policy = ControlPolicy::constant(steps, 0.0, ControlSet::unbounded());
    let ens = simulate_state(model, &policy, &paths).unwrap();
    (
        grid,
        solve_bsde(model, &ens, &paths, &BsdeOptions::default()).unwrap(),
    )
}

#[test]
fn zero_model_has_zero_adjoints() {
    let (_, sol) = run(&ModelSpec::zero(1.0), 10, 200, 1);
    for row in sol
        .p
        .iter()
        .chain(&sol.q)
        .chain(&sol.pq.big_p)
        .chain(&sol.pq.big_q)
    {
        assert!(row.iter().all(|v| v.abs() < 1e-12));
    }
}

#[test]
fn linear_terminal_cost_is_transported_unchanged() {
    let mut model = ModelSpec::zero(1.0);
    model.terminal.linear = 0.7;
    let (_, sol) = run(&model, 10, 200, 2);
    for row in &sol.p {
        assert!(row.iter().all(|v| (v - 0.7).abs() < 1e-10));
    }
}

#[test]
fn linear_drift_grows_the_adjoint_exponentially() {
    let mut model = ModelSpec::zero(1.0);
    model.drift = Coefficient::linear(0.5, 0.0, 0.0, 0.0);
    model.terminal.linear = 1.0;
    let (grid, sol) = run(&model, 50, 200, 3);
    for (i, row) in sol.p.iter().enumerate() {
        let want = (0.5 * (1.0 - grid.time(i))).exp();
        assert!((mean(row) - want).abs() <= 0.5 * grid.dt(), "step {i}");
    }
}

#[test]
fn adjoint_mean_matches_riccati() {
    let levy = LevyMeasure::new(vec![Mark { z: -0.5, rate: 0.3 }]).unwrap();
    let spec = LqSpec::default();
    let model = spec.model(&levy).unwrap();
    let grid = TimeGrid::new(1.0, 25).unwrap();
    let oracle = RiccatiOracle::solve(&spec, &levy, &grid).unwrap();
    let policy = ControlPolicy::schedule(&oracle.schedule(&grid), ControlSet::unbounded());
    let paths = generate_paths(grid, &levy, 5000, 4).unwrap();
    let ens = simulate_state(&model, &policy, &paths).unwrap();
    let sol = solve_bsde(&model, &ens, &paths, &BsdeOptions::default()).unwrap();
    for (i, row) in sol.p.iter().enumerate() {
        let ms = mean_se(row);
        let want = oracle.adjoint_mean(grid.time(i));
        assert!(
            (ms.mean - want).abs() <= 3.0 * ms.se + 0.1 * grid.dt(),
            "step {i}: {} vs {want}",
            ms.mean
        );
    }
}

#[test]
fn explicit_scheme_keeps_the_mean() {
    let levy = LevyMeasure::new(vec![Mark { z: 0.5, rate: 0.5 }]).unwrap();
    let model = LqSpec {
        mean_drift: 0.2,
        ..LqSpec::default()
    }
    .model(&levy)
    .unwrap();
    let grid = TimeGrid::new(1.0, 20).unwrap();
    let paths = generate_paths(grid, &levy, 2000, 5).unwrap();
    let policy = ControlPolicy::constant(20, 0.1, ControlSet::unbounded());
    let ens = simulate_state(&model, &policy, &paths).unwrap();
    let sol = solve_bsde(&model, &ens, &paths, &BsdeOptions::default()).unwrap();
    let fz = FrozenMeans::from_ensemble(&model, &ens);
    let n = grid.steps;
    let total: Vec<f64> = ens
        .paths
        .iter()
        .map(|s| {
            let mut v = model.phi(s.x[n], fz.terminal_mean) + model.g(s.x[n]) * fz.phi_y_mean;
            for i in 0..n {
                let l = model.l(grid.time(i), s.x[i], fz.cost_mean[i], s.controls[i]);
                v += (l + model.f(s.x[i]) * fz.ly_mean[i]) * grid.dt();
            }
            v
        })
        .collect();
    assert!((mean(&sol.pq.big_p[0]) - mean(&total)).abs() < 1e-10);
    assert!(sol.sweeps >= 1 && sol.sweeps <= 10);
    assert!(sol.sweep_moves.last().copied().unwrap_or(0.0) < 1e-3);
}

#[test]
fn hamiltonian_derivative_matches_finite_difference() {
    let levy = LevyMeasure::new(vec![
        Mark { z: -0.5, rate: 0.3 },
        Mark { z: 0.2, rate: 1.0 },
    ])
    .unwrap();
    let model = LqSpec {
        mean_drift: 0.3,
        benchmark: 0.1,
        ..LqSpec::default()
    }
    .model(&levy)
    .unwrap();
    let r = [0.4, -0.2];
    let at = |v: f64| {
        hamiltonian(
            &model,
            HamiltonianPoint {
                t: 0.3,
                x: 0.8,
                mean: 0.6,
                cost_mean: 0.6,
                v,
                p: 1.3,
                q: -0.7,
                r: &r,
                big_q: 0.2,
                rho: 1.1,
            },
        )
    };
    let h = 1e-5;
    let fd = (at(0.25 + h).h - at(0.25 - h).h) / (2.0 * h);
    assert!((fd - at(0.25).h_v).abs() < 1e-8);
}

#[test]
fn csv_has_one_row_per_node() {
    let (grid, sol) = run(&ModelSpec::zero(1.0), 8, 50, 6);
    let csv = sol.to_csv(&grid.times());
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "t,mean_p,mean_P,mean_Q,sweeps,condition,residual");
    assert_eq!(lines.len(), grid.steps + 2);
}
