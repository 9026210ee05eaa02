use mfsmp::forward::{
    estimate_rho_mean, gateaux_residual, simulate_state, simulate_state_direct, simulate_variation,
};
use mfsmp::model::{Coefficient, ControlPolicy, ControlSet, ModelSpec, NonlinearParams};
use mfsmp::paths::{generate_paths, LevyMeasure, Mark, TimeGrid};
use mfsmp::stats::log_log_slope;

fn levy() -> LevyMeasure {
    LevyMeasure::new(vec![Mark { z: -0.5, rate: 0.3 }]).unwrap()
}

#[test]
fn deterministic_linear_drift_is_the_euler_product() {
    let mut model = ModelSpec::zero(2.0);
    model.drift = Coefficient::linear(-0.4, 0.0, 1.0, 0.0);
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let paths = generate_paths(grid, &model.levy, 3, 1).unwrap();
    let ens = simulate_state(
        &model,
        &ControlPolicy::constant(10, 0.5, ControlSet::unbounded()),
        &paths,
    )
    .unwrap();
    let mut x = 2.0;
    for i in 0..10 {
        x += (-0.4 * x + 0.5) * grid.dt();
        for p in &ens.paths {
            assert!((p.x[i + 1] - x).abs() < 1e-14);
        }
    }
}

#[test]
fn unobserved_model_has_unit_density() {
    let mut model = NonlinearParams::default().model(&levy()).unwrap();
    model.observation.slope = 0.0;
    model.observation.level = 0.0;
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let paths = generate_paths(grid, &model.levy, 20, 2).unwrap();
    let ens = simulate_state(
        &model,
        &ControlPolicy::constant(10, 0.0, ControlSet::unbounded()),
        &paths,
    )
    .unwrap();
    assert!(ens.paths.iter().all(|p| p.rho.iter().all(|r| *r == 1.0)));
}

#[test]
fn density_has_unit_mean_and_direct_density_is_one() {
    let model = NonlinearParams::default().model(&levy()).unwrap();
    let grid = TimeGrid::new(1.0, 20).unwrap();
    let paths = generate_paths(grid, &model.levy, 20000, 3).unwrap();
    let policy = ControlPolicy::constant(20, 0.2, ControlSet::unbounded());
    let ens = simulate_state(&model, &policy, &paths).unwrap();
    for t in grid.times() {
        let ms = estimate_rho_mean(&ens, t).unwrap();
        assert!((ms.mean - 1.0).abs() <= 3.0 * ms.se + 1e-15, "t = {t}");
    }
    assert!(ens.paths.iter().all(|p| p.rho.iter().all(|r| *r > 0.0)));
    let direct = simulate_state_direct(&model, &policy, &paths).unwrap();
    assert!(direct.paths.iter().all(|p| p.rho.iter().all(|r| *r == 1.0)));
}

#[test]
fn controls_are_clipped_to_the_admissible_set() {
    let model = NonlinearParams {
        controls: ControlSet::interval(-0.5, 0.5),
        ..NonlinearParams::default()
    }
    .model(&levy())
    .unwrap();
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let paths = generate_paths(grid, &model.levy, 10, 4).unwrap();
    let policy = ControlPolicy::constant(10, 3.0, ControlSet::interval(-0.5, 0.5));
    let ens = simulate_state(&model, &policy, &paths).unwrap();
    assert!(ens
        .paths
        .iter()
        .all(|p| p.controls.iter().all(|v| *v == 0.5)));
}

#[test]
fn zero_direction_has_zero_variation() {
    let model = NonlinearParams {
        mean_field: true,
        ..NonlinearParams::default()
    }
    .model(&levy())
    .unwrap();
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let paths = generate_paths(grid, &model.levy, 200, 5).unwrap();
    assert!(simulate_state(
        &model,
        &ControlPolicy::constant(10, 0.1, ControlSet::unbounded()),
        &paths[..50]
    )
    .is_err());
    let ens = simulate_state(
        &model,
        &ControlPolicy::constant(10, 0.1, ControlSet::unbounded()),
        &paths,
    )
    .unwrap();
    let var = simulate_variation(&model, &|_: usize, _: f64| 0.0, &ens, &paths).unwrap();
    assert!(var
        .iter()
        .all(|v| v.x1.iter().chain(&v.rho1).all(|a| *a == 0.0)));
}

#[test]
fn perturbation_gap_is_quadratic_in_eps() {
    let model = NonlinearParams {
        mean_field: true,
        ..NonlinearParams::default()
    }
    .model(&levy())
    .unwrap();
    let grid = TimeGrid::new(1.0, 25).unwrap();
    let base = ControlPolicy::constant(25, 0.2, ControlSet::unbounded());
    let dir = |i: usize, y: f64| 1.0 + 0.5 * (i as f64 / 25.0) + 0.3 * y.tanh();
    let eps = [0.1, 0.05, 0.025];
    let rows = gateaux_residual(&model, &base, &dir, &eps, grid, 2000, 6).unwrap();
    let gap: Vec<f64> = rows.iter().map(|r| r.state_gap).collect();
    assert!((log_log_slope(&eps, &gap) - 2.0).abs() < 0.2);
    for w in rows.windows(2) {
        assert!(w[1].state_residual < w[0].state_residual);
        assert!(w[1].density_residual < w[0].density_residual);
    }
}

#[test]
fn ensemble_csv_lists_every_node() {
    let model = ModelSpec::zero(1.0);
    let grid = TimeGrid::new(1.0, 4).unwrap();
    let paths = generate_paths(grid, &model.levy, 3, 7).unwrap();
    let ens = simulate_state(
        &model,
        &ControlPolicy::constant(4, 0.0, ControlSet::unbounded()),
        &paths,
    )
    .unwrap();
    let csv = ens.to_csv();
    assert!(csv.starts_with("path_id,t,x,rho,control\n"));
    assert_eq!(csv.lines().count(), 1 + 3 * 5);
}
