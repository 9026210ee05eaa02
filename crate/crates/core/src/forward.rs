//! Euler scheme for the controlled state, the Girsanov density and the
//! first-variation processes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelSpec, Perturbed, Policy};
use crate::paths::{generate_paths, CellNoise, PathBundle, TimeGrid};
use crate::stats::{mean, mean_se, pairwise_sum, MeanSe};

pub const DEFAULT_MIN_PARTICLES: usize = 100;

/// Which measure the ensemble was simulated under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    /// Reference measure: `Y` is a Brownian motion and costs carry the density `rho`.
    Reweighted,
    /// Original measure: `Y` has drift `h(x)`, `rho` is identically 1.
    Direct,
}

impl Measure {
    pub fn label(&self) -> &'static str {
        match self {
            Measure::Reweighted => "P-reweighted",
            Measure::Direct => "P0-direct",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatePath {
    pub x: Vec<f64>,
    pub rho: Vec<f64>,
    /// Observation levels `Y(t_i)`.
    pub y: Vec<f64>,
    /// Control applied on each cell.
    pub controls: Vec<f64>,
}

impl StatePath {
    pub fn new(steps: usize, x0: f64) -> Self {
        let mut x = vec![0.0; steps + 1];
        x[0] = x0;
        let mut rho = vec![0.0; steps + 1];
        rho[0] = 1.0;
        StatePath {
            x,
            rho,
            y: vec![0.0; steps + 1],
            controls: vec![0.0; steps],
        }
    }

    /// Control in force at node `i`; the last cell's value is held at the horizon.
    #[inline]
    pub fn control_at(&self, i: usize) -> f64 {
        self.controls[i.min(self.controls.len() - 1)]
    }
}

/// One particle system. `mean_estimate[i]` is the density-weighted particle
/// mean of `x(t_i)`, the stand-in for the mean of the state under the
/// original measure; it is shared by every path.
#[derive(Debug, Clone, PartialEq)]
pub struct StateEnsemble {
    pub grid: TimeGrid,
    pub measure: Measure,
    pub paths: Vec<StatePath>,
    pub mean_estimate: Vec<f64>,
}

impl StateEnsemble {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn x_at(&self, i: usize) -> Vec<f64> {
        self.paths.iter().map(|p| p.x[i]).collect()
    }

    pub fn rho_at(&self, i: usize) -> Vec<f64> {
        self.paths.iter().map(|p| p.rho[i]).collect()
    }

    pub fn y_at(&self, i: usize) -> Vec<f64> {
        self.paths.iter().map(|p| p.y[i]).collect()
    }

    /// Density-weighted mean of `f(x(t_i))`.
    pub fn weighted_mean_of(&self, i: usize, f: impl Fn(f64) -> f64) -> f64 {
        let num: Vec<f64> = self.paths.iter().map(|p| p.rho[i] * f(p.x[i])).collect();
        let den: Vec<f64> = self.rho_at(i);
        pairwise_sum(&num) / pairwise_sum(&den)
    }

    /// CSV with columns `path_id,t,x,rho,control`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("path_id,t,x,rho,control\n");
        for (k, p) in self.paths.iter().enumerate() {
            for i in 0..=self.grid.steps {
                s.push_str(&format!(
                    "{},{},{},{},{}\n",
                    k,
                    self.grid.time(i),
                    p.x[i],
                    p.rho[i],
                    p.control_at(i)
                ));
            }
        }
        s
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    pub min_particles: usize,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            min_particles: DEFAULT_MIN_PARTICLES,
        }
    }
}

/// One Euler step of the state with left-point jumps and per-cell compensator.
#[inline]
pub(crate) fn step_state(
    model: &ModelSpec,
    t: f64,
    x: f64,
    ybar: f64,
    v: f64,
    dw: f64,
    counts: &[u32],
    dt: f64,
) -> f64 {
    let mut jumps = 0.0;
    let mut comp = 0.0;
    for (m, mark) in model.levy.marks.iter().enumerate() {
        let g = model.gamma(t, x, ybar, v, m);
        if counts[m] > 0 {
            jumps += counts[m] as f64 * g;
        }
        comp += mark.rate * g;
    }
    x + model.b(t, x, ybar, v) * dt + model.sigma(t, x, ybar, v) * dw + jumps - dt * comp
}

/// Per-cell density factor `exp(h dY - h^2 dt / 2)`.
#[inline]
pub(crate) fn density_factor(h: f64, dy: f64, dt: f64) -> f64 {
    (h * dy - 0.5 * h * h * dt).exp()
}

/// Advance a single path from node `from` to the horizon. Nodes `0..=from`
/// of `out` must already hold the path's prefix. `mean` supplies the
/// (frozen) particle mean for models whose state depends on it.
#[allow(clippy::too_many_arguments)]
pub(crate) fn advance_path(
    model: &ModelSpec,
    policy: &dyn Policy,
    noise: &CellNoise,
    mean: &[f64],
    grid: &TimeGrid,
    measure: Measure,
    out: &mut StatePath,
    from: usize,
) -> std::result::Result<(), (usize, String)> {
    for i in from..grid.steps {
        advance_window(model, policy, noise, mean[i], grid, measure, out, i)?;
    }
    Ok(())
}

fn check_paths(model: &ModelSpec, paths: &[PathBundle]) -> Result<TimeGrid> {
    let first = paths
        .first()
        .ok_or_else(|| Error::Usage("empty path list".into()))?;
    let grid = first.grid;
    for p in paths {
        if p.grid != grid {
            return Err(Error::Usage("paths do not share one grid".into()));
        }
        if p.n_marks != model.n_marks() {
            return Err(Error::Usage(format!(
                "paths carry {} marks, model has {}",
                p.n_marks,
                model.n_marks()
            )));
        }
    }
    Ok(grid)
}

/// Simulate under the reference measure.
pub fn simulate_state(
    model: &ModelSpec,
    policy: &dyn Policy,
    paths: &[PathBundle],
) -> Result<StateEnsemble> {
    simulate_with(
        model,
        policy,
        paths,
        Measure::Reweighted,
        SimOptions::default(),
    )
}

/// Simulate under the original measure, using `dY` of each bundle as the
/// increments of the observation noise.
pub fn simulate_state_direct(
    model: &ModelSpec,
    policy: &dyn Policy,
    paths: &[PathBundle],
) -> Result<StateEnsemble> {
    simulate_with(model, policy, paths, Measure::Direct, SimOptions::default())
}

pub fn simulate_with(
    model: &ModelSpec,
    policy: &dyn Policy,
    paths: &[PathBundle],
    measure: Measure,
    opts: SimOptions,
) -> Result<StateEnsemble> {
    model.validate()?;
    let grid = check_paths(model, paths)?;
    let n = grid.steps;
    let noises: Vec<CellNoise> = paths.par_iter().map(CellNoise::from_path).collect();
    let mut states: Vec<StatePath> = (0..paths.len())
        .map(|_| StatePath::new(n, model.x0))
        .collect();
    let mut mean_estimate = vec![0.0; n + 1];

    if model.state_depends_on_mean() {
        if paths.len() < opts.min_particles {
            return Err(Error::Usage(format!(
                "mean-field dynamics need at least {} particles, got {}",
                opts.min_particles,
                paths.len()
            )));
        }
        for i in 0..n {
            mean_estimate[i] = weighted_mean_at(&states, i);
            let res: Vec<std::result::Result<(), (usize, String)>> = states
                .par_iter_mut()
                .zip(noises.par_iter())
                .map(|(s, noise)| {
                    advance_window(model, policy, noise, mean_estimate[i], &grid, measure, s, i)
                })
                .collect();
            first_error(res)?;
        }
    } else {
        let res: Vec<std::result::Result<(), (usize, String)>> = states
            .par_iter_mut()
            .zip(noises.par_iter())
            .map(|(s, noise)| {
                advance_path(model, policy, noise, &mean_estimate, &grid, measure, s, 0)
            })
            .collect();
        first_error(res)?;
        for (i, m) in mean_estimate.iter_mut().enumerate().take(n) {
            *m = weighted_mean_at(&states, i);
        }
    }
    mean_estimate[n] = weighted_mean_at(&states, n);
    Ok(StateEnsemble {
        grid,
        measure,
        paths: states,
        mean_estimate,
    })
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn advance_window(
    model: &ModelSpec,
    policy: &dyn Policy,
    noise: &CellNoise,
    ybar: f64,
    grid: &TimeGrid,
    measure: Measure,
    out: &mut StatePath,
    i: usize,
) -> std::result::Result<(), (usize, String)> {
    let dt = grid.dt();
    let t = grid.time(i);
    let x = out.x[i];
    let v = policy.control(i, out.y[i]);
    out.controls[i] = v;
    let xn = step_state(model, t, x, ybar, v, noise.dw1[i], noise.counts_at(i), dt);
    let h = model.h(t, x);
    match measure {
        Measure::Reweighted => {
            out.rho[i + 1] = out.rho[i] * density_factor(h, noise.dy[i], dt);
            out.y[i + 1] = out.y[i] + noise.dy[i];
        }
        Measure::Direct => {
            out.rho[i + 1] = 1.0;
            out.y[i + 1] = out.y[i] + h * dt + noise.dy[i];
        }
    }
    out.x[i + 1] = xn;
    if !xn.is_finite() {
        return Err((i, format!("state became non-finite ({xn})")));
    }
    if !(out.rho[i + 1].is_finite() && out.rho[i + 1] > 0.0) {
        return Err((i, format!("density left (0, inf) ({})", out.rho[i + 1])));
    }
    Ok(())
}

fn first_error(res: Vec<std::result::Result<(), (usize, String)>>) -> Result<()> {
    for (k, r) in res.into_iter().enumerate() {
        if let Err((step, msg)) = r {
            return Err(Error::Simulation { path: k, step, msg });
        }
    }
    Ok(())
}

fn weighted_mean_at(states: &[StatePath], i: usize) -> f64 {
    let num: Vec<f64> = states.iter().map(|s| s.rho[i] * s.x[i]).collect();
    let den: Vec<f64> = states.iter().map(|s| s.rho[i]).collect();
    pairwise_sum(&num) / pairwise_sum(&den)
}

/// Sample mean and standard error of `rho(t)`.
pub fn estimate_rho_mean(ens: &StateEnsemble, t: f64) -> Result<MeanSe> {
    if ens.len() < 2 {
        return Err(Error::Usage("need at least two paths".into()));
    }
    let i = ens.grid.node(t)?;
    Ok(mean_se(&ens.rho_at(i)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariationPath {
    pub x1: Vec<f64>,
    pub rho1: Vec<f64>,
}

/// Derivative of the particle mean `sum(rho x)/sum(rho)` along a variation.
fn mean_derivative(states: &[StatePath], vars: &[VariationPath], i: usize, ybar: f64) -> f64 {
    let num: Vec<f64> = states
        .iter()
        .zip(vars)
        .map(|(s, v)| v.rho1[i] * s.x[i] + s.rho[i] * v.x1[i])
        .collect();
    let r1: Vec<f64> = vars.iter().map(|v| v.rho1[i]).collect();
    let den: Vec<f64> = states.iter().map(|s| s.rho[i]).collect();
    (pairwise_sum(&num) - ybar * pairwise_sum(&r1)) / pairwise_sum(&den)
}

/// First variation of `(x, rho)` in the control direction `direction`,
/// linearised along the ensemble `ens`. This is the exact derivative of the
/// Euler scheme, so `(x^eps - x)/eps -> x1` as `eps -> 0` on common paths.
pub fn simulate_variation(
    model: &ModelSpec,
    direction: &dyn Policy,
    ens: &StateEnsemble,
    paths: &[PathBundle],
) -> Result<Vec<VariationPath>> {
    let init = |_k: usize| (0.0, 0usize);
    variation_core(model, Some(direction), ens, paths, init)
}

/// Homogeneous variation started from `x1(t_start) = 1`; used to check the
/// fundamental solution. Only for models whose state ignores the mean.
pub fn homogeneous_variation(
    model: &ModelSpec,
    ens: &StateEnsemble,
    paths: &[PathBundle],
    start: usize,
) -> Result<Vec<VariationPath>> {
    if model.state_depends_on_mean() {
        return Err(Error::Usage(
            "homogeneous transport is defined for mean-free dynamics".into(),
        ));
    }
    variation_core(model, None, ens, paths, |_| (1.0, start))
}

fn variation_core(
    model: &ModelSpec,
    direction: Option<&dyn Policy>,
    ens: &StateEnsemble,
    paths: &[PathBundle],
    init: impl Fn(usize) -> (f64, usize),
) -> Result<Vec<VariationPath>> {
    if ens.measure != Measure::Reweighted {
        return Err(Error::Usage(
            "variations are taken under the reference measure".into(),
        ));
    }
    let grid = check_paths(model, paths)?;
    if grid != ens.grid || paths.len() != ens.len() {
        return Err(Error::Usage("ensemble and paths do not match".into()));
    }
    let n = grid.steps;
    let dt = grid.dt();
    let noises: Vec<CellNoise> = paths.par_iter().map(CellNoise::from_path).collect();
    let (_, start) = init(0);
    let mut vars: Vec<VariationPath> = (0..paths.len())
        .map(|k| {
            let (x1s, _) = init(k);
            let mut x1 = vec![0.0; n + 1];
            x1[start] = x1s;
            VariationPath {
                x1,
                rho1: vec![0.0; n + 1],
            }
        })
        .collect();
    let coupled = model.state_depends_on_mean();
    for i in start..n {
        let t = grid.time(i);
        let ybar = ens.mean_estimate[i];
        let m1 = if coupled {
            mean_derivative(&ens.paths, &vars, i, ybar)
        } else {
            0.0
        };
        vars.par_iter_mut()
            .zip(ens.paths.par_iter())
            .zip(noises.par_iter())
            .for_each(|((var, s), noise)| {
                let x = s.x[i];
                let v = s.controls[i];
                let d = direction.map_or(0.0, |p| p.control(i, s.y[i]));
                let x1 = var.x1[i];
                let mut jump = 0.0;
                let counts = noise.counts_at(i);
                for (m, mark) in model.levy.marks.iter().enumerate() {
                    let dg = model.gamma_x(t, x, ybar, v, m) * x1
                        + model.gamma_y(t, x, ybar, v, m) * m1
                        + model.gamma_v(t, x, ybar, v, m) * d;
                    jump += (counts[m] as f64 - mark.rate * dt) * dg;
                }
                let db = model.b_x(t, x, ybar, v) * x1
                    + model.b_y(t, x, ybar, v) * m1
                    + model.b_v(t, x, ybar, v) * d;
                let ds = model.sigma_x(t, x, ybar, v) * x1
                    + model.sigma_y(t, x, ybar, v) * m1
                    + model.sigma_v(t, x, ybar, v) * d;
                var.x1[i + 1] = x1 + db * dt + ds * noise.dw1[i] + jump;
                let h = model.h(t, x);
                let e = density_factor(h, noise.dy[i], dt);
                var.rho1[i + 1] =
                    var.rho1[i] * e + s.rho[i + 1] * model.h_x(t, x) * x1 * (noise.dy[i] - h * dt);
            });
    }
    Ok(vars)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GateauxRow {
    pub eps: f64,
    /// `sup_t E|(x^eps - x)/eps - x1|^2`
    pub state_residual: f64,
    /// `sup_t E|(rho^eps - rho)/eps - rho1|^2`
    pub density_residual: f64,
    /// `sup_t E|x^eps - x|^2`
    pub state_gap: f64,
}

/// Common-random-number comparison of perturbed runs with the first variation.
#[allow(clippy::too_many_arguments)]
pub fn gateaux_residual(
    model: &ModelSpec,
    base: &dyn Policy,
    direction: &dyn Policy,
    eps_list: &[f64],
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<GateauxRow>> {
    let paths = generate_paths(grid, &model.levy, n_paths, seed)?;
    gateaux_residual_on(model, base, direction, eps_list, &paths)
}

pub fn gateaux_residual_on(
    model: &ModelSpec,
    base: &dyn Policy,
    direction: &dyn Policy,
    eps_list: &[f64],
    paths: &[PathBundle],
) -> Result<Vec<GateauxRow>> {
    let ens = simulate_state(model, base, paths)?;
    let var = simulate_variation(model, direction, &ens, paths)?;
    let n = ens.grid.steps;
    let mut rows = Vec::new();
    for &eps in eps_list {
        if !(eps > 0.0) {
            return Err(Error::Domain(format!("eps must be positive, got {eps}")));
        }
        let pert = Perturbed {
            base,
            direction,
            eps,
            bounds: model.controls,
        };
        let ens_e = simulate_state(model, &pert, paths)?;
        let mut row = GateauxRow {
            eps,
            state_residual: 0.0,
            density_residual: 0.0,
            state_gap: 0.0,
        };
        for i in 0..=n {
            let mut rx = Vec::with_capacity(ens.len());
            let mut rr = Vec::with_capacity(ens.len());
            let mut gap = Vec::with_capacity(ens.len());
            for ((a, b), v) in ens.paths.iter().zip(&ens_e.paths).zip(&var) {
                let dx = b.x[i] - a.x[i];
                let e1 = dx / eps - v.x1[i];
                let e2 = (b.rho[i] - a.rho[i]) / eps - v.rho1[i];
                rx.push(e1 * e1);
                rr.push(e2 * e2);
                gap.push(dx * dx);
            }
            row.state_residual = row.state_residual.max(mean(&rx));
            row.density_residual = row.density_residual.max(mean(&rr));
            row.state_gap = row.state_gap.max(mean(&gap));
        }
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Coefficient, ControlPolicy, ControlSet};
    use crate::paths::{LevyMeasure, Mark};

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(1.0, n).unwrap()
    }

    #[test]
    fn zero_model_is_frozen() {
        let m = ModelSpec::zero(1.5);
        let paths = generate_paths(grid(10), &m.levy, 20, 1).unwrap();
        let pol = ControlPolicy::constant(10, 0.3, ControlSet::unbounded());
        let ens = simulate_state(&m, &pol, &paths).unwrap();
        for p in &ens.paths {
            assert!(p.x.iter().all(|&x| x == 1.5));
            assert!(p.rho.iter().all(|&r| r == 1.0));
        }
        let r = estimate_rho_mean(&ens, 1.0).unwrap();
        assert_eq!((r.mean, r.se), (1.0, 0.0));
    }

    #[test]
    fn linear_ode_converges_first_order() {
        let mut m = ModelSpec::zero(1.0);
        m.drift = Coefficient::linear(0.7, 0.0, 0.0, 0.0);
        let pol = ControlPolicy::constant(1, 0.0, ControlSet::unbounded());
        let mut errs = Vec::new();
        let mut dts = Vec::new();
        for n in [20, 40, 80, 160] {
            let paths = generate_paths(grid(n), &m.levy, 1, 0).unwrap();
            let ens = simulate_state(&m, &pol, &paths).unwrap();
            errs.push((ens.paths[0].x[n] - 0.7f64.exp()).abs() / 0.7f64.exp());
            dts.push(1.0 / n as f64);
        }
        let s = crate::stats::log_log_slope(&dts, &errs);
        assert!((s - 1.0).abs() < 0.1, "slope {s}");
    }

    #[test]
    fn non_finite_state_is_reported() {
        let mut m = ModelSpec::zero(1.0);
        m.drift = Coefficient::linear(1e300, 0.0, 0.0, 0.0);
        let paths = generate_paths(grid(5), &m.levy, 3, 0).unwrap();
        let pol = ControlPolicy::constant(5, 0.0, ControlSet::unbounded());
        match simulate_state(&m, &pol, &paths) {
            Err(Error::Simulation { path, step, .. }) => assert_eq!((path, step), (0, 1)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn particle_floor_enforced() {
        let mut m = ModelSpec::zero(1.0);
        m.mean_field_in_state = true;
        m.drift.y = 0.2;
        let paths = generate_paths(grid(5), &m.levy, 10, 0).unwrap();
        let pol = ControlPolicy::constant(5, 0.0, ControlSet::unbounded());
        assert!(matches!(
            simulate_state(&m, &pol, &paths),
            Err(Error::Usage(_))
        ));
        let opts = SimOptions { min_particles: 5 };
        assert!(simulate_with(&m, &pol, &paths, Measure::Reweighted, opts).is_ok());
    }

    #[test]
    fn zero_direction_gives_zero_variation() {
        let levy = LevyMeasure::new(vec![Mark { z: 0.5, rate: 2.0 }]).unwrap();
        let m = crate::model::NonlinearParams::default()
            .model(&levy)
            .unwrap();
        let paths = generate_paths(grid(20), &levy, 30, 3).unwrap();
        let pol = ControlPolicy::constant(20, 0.1, ControlSet::unbounded());
        let zero = ControlPolicy::constant(20, 0.0, ControlSet::unbounded());
        let ens = simulate_state(&m, &pol, &paths).unwrap();
        let var = simulate_variation(&m, &zero, &ens, &paths).unwrap();
        for v in var {
            assert!(v.x1.iter().all(|&a| a == 0.0));
            assert!(v.rho1.iter().all(|&a| a == 0.0));
        }
    }
}
