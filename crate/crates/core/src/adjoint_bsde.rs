//! Backward regression solver for the two adjoint equations of the
//! mean-field problem, the Hamiltonian and the variational inequality.
//!
//! Explicit scheme: `Y_i = E[Y_{i+1} + f_i dt | x_i, Y_i]`, with the
//! martingale integrands recovered by projecting `Y_{i+1}` times the noise
//! increment of cell `i`. All conditional expectations are taken under the
//! reference measure, on which the ensemble is simulated.

use serde::Serialize;

use crate::adjoint_mall::{conditional_profile, FrozenMeans, StationarityReport};
use crate::error::{Error, Result};
use crate::forward::{Measure, StateEnsemble};
use crate::model::{ModelSpec, Policy};
use crate::paths::{Driver, PathBundle};
use crate::regression::{Basis, ConditionalEstimator, Projector, DEFAULT_RIDGE};
use crate::stats::{mean, pairwise_sum};

pub const MAX_SWEEPS: usize = 10;
pub const SWEEP_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BsdeOptions {
    pub basis: Basis,
    pub ridge: f64,
    pub max_sweeps: usize,
    pub sweep_tol: f64,
}

impl Default for BsdeOptions {
    fn default() -> Self {
        BsdeOptions {
            basis: Basis::Quadratic,
            ridge: DEFAULT_RIDGE,
            max_sweeps: MAX_SWEEPS,
            sweep_tol: SWEEP_TOL,
        }
    }
}

/// Per-step regression diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepDiagnostics {
    pub t: f64,
    pub condition: f64,
    pub residual: f64,
}

/// Solution of the equation driven by the running cost, martingale part
/// against the observation and the compensated jumps. Time-major storage:
/// `big_p[i][path]`, `big_g[i][mark][path]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PqSolution {
    pub big_p: Vec<Vec<f64>>,
    pub big_q: Vec<Vec<f64>>,
    pub big_g: Vec<Vec<Vec<f64>>>,
    pub diagnostics: Vec<StepDiagnostics>,
}

/// Both adjoint equations. `p` has `N+1` rows, `q` and `r` have `N`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BsdeSolution {
    pub pq: PqSolution,
    pub p: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<Vec<f64>>>,
    pub sweeps: usize,
    /// Relative movement of `p` after each sweep.
    pub sweep_moves: Vec<f64>,
    pub diagnostics: Vec<StepDiagnostics>,
}

impl BsdeSolution {
    pub fn mean_p(&self) -> Vec<f64> {
        self.p.iter().map(|row| mean(row)).collect()
    }

    /// CSV with columns `t,mean_p,mean_P,mean_Q,sweeps,condition,residual`.
    pub fn to_csv(&self, times: &[f64]) -> String {
        let mut s = String::from("t,mean_p,mean_P,mean_Q,sweeps,condition,residual\n");
        for (i, t) in times.iter().enumerate() {
            let (mq, cond, res) = match self.diagnostics.get(i) {
                Some(d) => (mean(&self.pq.big_q[i]), d.condition, d.residual),
                None => (0.0, 0.0, 0.0),
            };
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                t,
                mean(&self.p[i]),
                mean(&self.pq.big_p[i]),
                mq,
                self.sweeps,
                cond,
                res
            ));
        }
        s
    }
}

fn check_inputs(model: &ModelSpec, ens: &StateEnsemble, paths: &[PathBundle]) -> Result<()> {
    if ens.measure != Measure::Reweighted {
        return Err(Error::Usage(
            "backward solver needs a reference-measure ensemble".into(),
        ));
    }
    if paths.len() != ens.len() || paths.iter().any(|p| p.grid != ens.grid) {
        return Err(Error::Usage("ensemble and paths do not match".into()));
    }
    if paths.iter().any(|p| p.n_marks != model.n_marks()) {
        return Err(Error::Usage("paths and model disagree on marks".into()));
    }
    Ok(())
}

fn projectors(ens: &StateEnsemble, opts: &BsdeOptions) -> Result<Vec<Projector>> {
    (0..ens.grid.steps)
        .map(|i| {
            Projector::new(
                &opts.basis.columns(&ens.x_at(i), &ens.y_at(i)),
                opts.ridge,
                i,
            )
        })
        .collect()
}

struct Increments {
    dw1: Vec<Vec<f64>>,
    dy: Vec<Vec<f64>>,
    dn: Vec<Vec<Vec<f64>>>,
}

fn increments(model: &ModelSpec, paths: &[PathBundle]) -> Increments {
    let n = paths[0].grid.steps;
    let nm = model.n_marks();
    let dt = paths[0].grid.dt();
    let counts: Vec<Vec<u32>> = paths.iter().map(|p| p.cell_counts()).collect();
    let dn = (0..n)
        .map(|i| {
            (0..nm)
                .map(|m| {
                    let rdt = model.levy.marks[m].rate * dt;
                    counts.iter().map(|c| c[i * nm + m] as f64 - rdt).collect()
                })
                .collect()
        })
        .collect();
    Increments {
        dw1: (0..n)
            .map(|i| paths.iter().map(|p| p.increments(Driver::W1)[i]).collect())
            .collect(),
        dy: (0..n)
            .map(|i| paths.iter().map(|p| p.increments(Driver::Y)[i]).collect())
            .collect(),
        dn,
    }
}

fn product(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

/// Solve the cost-driven equation for `(P, Q, G)`.
pub fn solve_bsde_pq(
    model: &ModelSpec,
    ens: &StateEnsemble,
    paths: &[PathBundle],
    opts: &BsdeOptions,
) -> Result<PqSolution> {
    check_inputs(model, ens, paths)?;
    let proj = projectors(ens, opts)?;
    let inc = increments(model, paths);
    let frozen = FrozenMeans::from_ensemble(model, ens);
    solve_pq_with(model, ens, &proj, &inc, &frozen)
}

fn solve_pq_with(
    model: &ModelSpec,
    ens: &StateEnsemble,
    proj: &[Projector],
    inc: &Increments,
    frozen: &FrozenMeans,
) -> Result<PqSolution> {
    let grid = ens.grid;
    let (n, dt, nm) = (grid.steps, grid.dt(), model.n_marks());
    let mut big_p = vec![Vec::new(); n + 1];
    let mut big_q = vec![Vec::new(); n];
    let mut big_g = vec![Vec::new(); n];
    let mut diagnostics = vec![
        StepDiagnostics {
            t: 0.0,
            condition: 0.0,
            residual: 0.0
        };
        n
    ];
    big_p[n] = ens
        .paths
        .iter()
        .map(|s| model.phi(s.x[n], frozen.terminal_mean) + model.g(s.x[n]) * frozen.phi_y_mean)
        .collect();
    for i in (0..n).rev() {
        let t = grid.time(i);
        let next = &big_p[i + 1];
        let target: Vec<f64> = ens
            .paths
            .iter()
            .zip(next)
            .map(|(s, pn)| {
                let (x, v) = (s.x[i], s.controls[i]);
                let drv = model.l(t, x, frozen.cost_mean[i], v) + model.f(x) * frozen.ly_mean[i];
                pn + drv * dt
            })
            .collect();
        let fit = proj[i].fit(&target)?;
        diagnostics[i] = StepDiagnostics {
            t,
            condition: proj[i].condition_number(),
            residual: fit.residual_var.sqrt(),
        };
        big_q[i] = scaled(proj[i].fit(&product(next, &inc.dy[i]))?.values, 1.0 / dt);
        big_g[i] = (0..nm)
            .map(|m| {
                let rdt = model.levy.marks[m].rate * dt;
                Ok(scaled(
                    proj[i].fit(&product(next, &inc.dn[i][m]))?.values,
                    1.0 / rdt,
                ))
            })
            .collect::<Result<_>>()?;
        big_p[i] = fit.values;
    }
    Ok(PqSolution {
        big_p,
        big_q,
        big_g,
        diagnostics,
    })
}

fn scaled(mut v: Vec<f64>, c: f64) -> Vec<f64> {
    v.iter_mut().for_each(|a| *a *= c);
    v
}

fn rms(v: &[f64]) -> f64 {
    let sq: Vec<f64> = v.iter().map(|a| a * a).collect();
    mean(&sq).sqrt()
}

/// Solve the state-costate equation for `(p, q, R)` given `(P, Q, G)`.
///
/// Same-time terms of the driver use the previous sweep's `p` (the
/// regression of `p_{i+1}` in the first sweep); sweeps repeat until `p`
/// moves by less than `sweep_tol` relative.
pub fn solve_bsde_p(
    model: &ModelSpec,
    ens: &StateEnsemble,
    paths: &[PathBundle],
    pq: PqSolution,
    opts: &BsdeOptions,
) -> Result<BsdeSolution> {
    check_inputs(model, ens, paths)?;
    let proj = projectors(ens, opts)?;
    let inc = increments(model, paths);
    let frozen = FrozenMeans::from_ensemble(model, ens);
    solve_p_with(model, ens, &proj, &inc, &frozen, pq, opts)
}

fn solve_p_with(
    model: &ModelSpec,
    ens: &StateEnsemble,
    proj: &[Projector],
    inc: &Increments,
    frozen: &FrozenMeans,
    pq: PqSolution,
    opts: &BsdeOptions,
) -> Result<BsdeSolution> {
    let grid = ens.grid;
    let (n, dt, nm) = (grid.steps, grid.dt(), model.n_marks());
    let np = ens.len();
    let terminal: Vec<f64> = ens
        .paths
        .iter()
        .map(|s| {
            let x = s.x[n];
            s.rho[n] * (model.phi_x(x, frozen.terminal_mean) + model.g_prime(x) * frozen.phi_y_mean)
        })
        .collect();
    let mut prev: Option<Vec<Vec<f64>>> = None;
    let mut moves = Vec::new();
    let mut diagnostics = vec![
        StepDiagnostics {
            t: 0.0,
            condition: 0.0,
            residual: 0.0
        };
        n
    ];
    for sweep in 1..=opts.max_sweeps.max(1) {
        let mut p = vec![Vec::new(); n + 1];
        let mut q = vec![Vec::new(); n];
        let mut r = vec![Vec::new(); n];
        p[n] = terminal.clone();
        for i in (0..n).rev() {
            let t = grid.time(i);
            let ybar = ens.mean_estimate[i];
            let next = &p[i + 1];
            let qi = scaled(proj[i].fit(&product(next, &inc.dw1[i]))?.values, 1.0 / dt);
            let ri: Vec<Vec<f64>> = (0..nm)
                .map(|m| {
                    let rdt = model.levy.marks[m].rate * dt;
                    Ok(scaled(
                        proj[i].fit(&product(next, &inc.dn[i][m]))?.values,
                        1.0 / rdt,
                    ))
                })
                .collect::<Result<_>>()?;
            let frozen_p = match &prev {
                Some(pp) => pp[i].clone(),
                None => proj[i].fit(next)?.values,
            };
            let st = &ens.paths;
            let e_by = pairwise_sum(
                &(0..np)
                    .map(|k| model.b_y(t, st[k].x[i], ybar, st[k].controls[i]) * frozen_p[k])
                    .collect::<Vec<_>>(),
            ) / np as f64;
            let e_sy = pairwise_sum(
                &(0..np)
                    .map(|k| model.sigma_y(t, st[k].x[i], ybar, st[k].controls[i]) * qi[k])
                    .collect::<Vec<_>>(),
            ) / np as f64;
            let e_gy: Vec<f64> = (0..nm)
                .map(|m| {
                    pairwise_sum(
                        &(0..np)
                            .map(|k| {
                                model.gamma_y(t, st[k].x[i], ybar, st[k].controls[i], m) * ri[m][k]
                            })
                            .collect::<Vec<_>>(),
                    ) / np as f64
                })
                .collect();
            let target: Vec<f64> = (0..np)
                .map(|k| {
                    let s = &st[k];
                    let (x, v, rho) = (s.x[i], s.controls[i], s.rho[i]);
                    let mut drv = model.b_x(t, x, ybar, v) * frozen_p[k]
                        + rho * e_by
                        + model.sigma_x(t, x, ybar, v) * qi[k]
                        + rho * e_sy
                        + rho
                            * (model.h_x(t, x) * pq.big_q[i][k]
                                + model.l_x(t, x, frozen.cost_mean[i], v)
                                + model.f_prime(x) * frozen.ly_mean[i]);
                    for (m, mark) in model.levy.marks.iter().enumerate() {
                        drv += mark.rate
                            * (model.gamma_x(t, x, ybar, v, m) * ri[m][k] + rho * e_gy[m]);
                    }
                    next[k] + drv * dt
                })
                .collect();
            let fit = proj[i].fit(&target)?;
            diagnostics[i] = StepDiagnostics {
                t,
                condition: proj[i].condition_number(),
                residual: fit.residual_var.sqrt(),
            };
            p[i] = fit.values;
            q[i] = qi;
            r[i] = ri;
        }
        let reference = match &prev {
            Some(pp) => pp.clone(),
            // first sweep: compare with the frozen regression it used
            None => {
                let mut pp = vec![Vec::new(); n + 1];
                for i in 0..n {
                    pp[i] = proj[i].fit(&p[i + 1])?.values;
                }
                pp[n] = p[n].clone();
                pp
            }
        };
        let scale = (0..=n).map(|i| rms(&p[i])).fold(0.0, f64::max);
        let diff = (0..=n)
            .map(|i| {
                rms(&p[i]
                    .iter()
                    .zip(&reference[i])
                    .map(|(a, b)| a - b)
                    .collect::<Vec<_>>())
            })
            .fold(0.0, f64::max);
        let mv = if scale > 0.0 { diff / scale } else { 0.0 };
        moves.push(mv);
        if mv <= opts.sweep_tol {
            return Ok(BsdeSolution {
                pq,
                p,
                q,
                r,
                sweeps: sweep,
                sweep_moves: moves,
                diagnostics,
            });
        }
        prev = Some(p);
    }
    Err(Error::Convergence(format!(
        "mean-field sweeps did not settle: movement {:?}",
        moves
    )))
}

/// Both equations on one ensemble.
pub fn solve_bsde(
    model: &ModelSpec,
    ens: &StateEnsemble,
    paths: &[PathBundle],
    opts: &BsdeOptions,
) -> Result<BsdeSolution> {
    check_inputs(model, ens, paths)?;
    let proj = projectors(ens, opts)?;
    let inc = increments(model, paths);
    let frozen = FrozenMeans::from_ensemble(model, ens);
    let pq = solve_pq_with(model, ens, &proj, &inc, &frozen)?;
    solve_p_with(model, ens, &proj, &inc, &frozen, pq, opts)
}

/// Arguments of the Hamiltonian at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HamiltonianPoint<'a> {
    pub t: f64,
    pub x: f64,
    /// Mean entering the state coefficients.
    pub mean: f64,
    /// Mean entering the running cost.
    pub cost_mean: f64,
    pub v: f64,
    pub p: f64,
    pub q: f64,
    pub r: &'a [f64],
    pub big_q: f64,
    pub rho: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HamiltonianEval {
    pub h: f64,
    pub h_v: f64,
}

pub fn hamiltonian(model: &ModelSpec, a: HamiltonianPoint) -> HamiltonianEval {
    let (t, x, y, v) = (a.t, a.x, a.mean, a.v);
    let mut h = model.b(t, x, y, v) * a.p
        + model.sigma(t, x, y, v) * a.q
        + model.h(t, x) * a.big_q
        + model.l(t, x, a.cost_mean, v) * a.rho;
    let mut h_v = model.b_v(t, x, y, v) * a.p
        + model.sigma_v(t, x, y, v) * a.q
        + model.l_v(t, x, a.cost_mean, v) * a.rho;
    for (m, mark) in model.levy.marks.iter().enumerate() {
        h += mark.rate * a.r[m] * model.gamma(t, x, y, v, m);
        h_v += mark.rate * a.r[m] * model.gamma_v(t, x, y, v, m);
    }
    HamiltonianEval { h, h_v }
}

/// Pathwise `H_v` at every step before the horizon, `[i][path]`.
pub fn hv_values(model: &ModelSpec, ens: &StateEnsemble, sol: &BsdeSolution) -> Vec<Vec<f64>> {
    let n = ens.grid.steps;
    let nm = model.n_marks();
    let cost_mean: Vec<f64> = (0..n)
        .map(|i| ens.weighted_mean_of(i, |x| model.f(x)))
        .collect();
    let mut r = vec![0.0; nm];
    (0..n)
        .map(|i| {
            ens.paths
                .iter()
                .enumerate()
                .map(|(k, s)| {
                    for (m, rm) in r.iter_mut().enumerate() {
                        *rm = sol.r[i][m][k];
                    }
                    hamiltonian(
                        model,
                        HamiltonianPoint {
                            t: ens.grid.time(i),
                            x: s.x[i],
                            mean: ens.mean_estimate[i],
                            cost_mean: cost_mean[i],
                            v: s.controls[i],
                            p: sol.p[i][k],
                            q: sol.q[i][k],
                            r: &r,
                            big_q: sol.pq.big_q[i][k],
                            rho: s.rho[i],
                        },
                    )
                    .h_v
                })
                .collect()
        })
        .collect()
}

/// `E[H_v | F^Y_t]` on the grid.
pub fn stationarity(
    model: &ModelSpec,
    ens: &StateEnsemble,
    sol: &BsdeSolution,
    est: &ConditionalEstimator,
) -> Result<StationarityReport> {
    conditional_profile(ens, &hv_values(model, ens, sol), est)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InequalityReport {
    pub profile: StationarityReport,
    /// Smallest fitted value over all paths and times.
    pub min: f64,
}

/// `E[H_v (v - u) | F^Y_t]` for a candidate policy `v`.
pub fn variational_inequality(
    model: &ModelSpec,
    ens: &StateEnsemble,
    sol: &BsdeSolution,
    candidate: &dyn Policy,
    est: &ConditionalEstimator,
) -> Result<InequalityReport> {
    let mut values = hv_values(model, ens, sol);
    for (i, row) in values.iter_mut().enumerate() {
        for (k, s) in ens.paths.iter().enumerate() {
            let v = candidate.control(i, s.y[i]);
            if !model.controls.contains(v) {
                return Err(Error::Domain(format!(
                    "candidate control {v} outside U at step {i}"
                )));
            }
            row[k] *= v - s.controls[i];
        }
    }
    let profile = conditional_profile(ens, &values, est)?;
    let min = profile
        .rows
        .iter()
        .map(|r| r.min)
        .fold(f64::INFINITY, f64::min);
    Ok(InequalityReport { profile, min })
}
