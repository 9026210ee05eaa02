//! Fixed-point solvers for the optimal control of the two LQ applications,
//! plus the baselines they are checked against.

pub mod riccati;
pub mod search;

use serde::Serialize;

use crate::adjoint_bsde::{self, solve_bsde, BsdeOptions};
use crate::adjoint_mall::{
    self, conditional_profile, sec3_adjoint, Sec3Options, StationarityReport,
};
use crate::cost::{cost_contributions, cost_of, paired_difference, CostEstimate};
use crate::error::{Error, Result};
use crate::forward::{simulate_state, StateEnsemble};
use crate::model::{ControlPolicy, LqSpec, ModelSpec, Policy, Sec3LqSpec};
use crate::paths::{LevyMeasure, PathBundle};
use crate::regression::ConditionalEstimator;
use crate::stats::pairwise_sum;

pub use riccati::{schedule_cost, RiccatiOracle};
pub use search::{direct_search, DirectSearchResult, SearchOptions};

/// Which adjoint representation drives the control update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Engine {
    /// Backward regression for `(p, q, R)`.
    Bsde,
    /// Pathwise closed form with Malliavin derivatives; mean-free state only.
    Malliavin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FixedPointOptions {
    pub max_sweeps: usize,
    pub damping: f64,
    /// Stop when the sup over time of the RMS control change falls below.
    pub tol: f64,
    pub bsde: BsdeOptions,
    pub sec3: Sec3Options,
    pub estimator: ConditionalEstimator,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        FixedPointOptions {
            max_sweeps: 40,
            damping: 0.5,
            tol: 1e-3,
            bsde: BsdeOptions::default(),
            sec3: Sec3Options::default(),
            estimator: ConditionalEstimator::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRecord {
    pub sweep: usize,
    /// Cost of the policy going into the sweep.
    pub cost: f64,
    pub cost_se: f64,
    /// Sup over time of the density-weighted RMS change of the control.
    pub change: f64,
    /// Density-weighted mean control per cell, before the update.
    pub mean_control: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Baseline {
    pub name: String,
    pub cost: CostEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LqSolveReport {
    pub engine: Engine,
    pub sweeps: Vec<SweepRecord>,
    pub policy: ControlPolicy,
    pub cost: CostEstimate,
    pub baselines: Vec<Baseline>,
    pub stationarity: Option<StationarityReport>,
    pub converged: bool,
    pub note: String,
}

impl LqSolveReport {
    /// CSV with columns `sweep,cost,cost_se,change`.
    pub fn sweeps_csv(&self) -> String {
        let mut s = String::from("sweep,cost,cost_se,change\n");
        for r in &self.sweeps {
            s.push_str(&format!(
                "{},{},{},{}\n",
                r.sweep, r.cost, r.cost_se, r.change
            ));
        }
        s
    }
}

fn is_control_free(model: &ModelSpec) -> bool {
    model.drift.v == 0.0
        && model.diffusion.v == 0.0
        && (model.jump.v == 0.0 || model.levy.is_empty())
}

/// Pathwise `H_v` at each step before the horizon for the current ensemble.
pub fn hv_for(
    model: &ModelSpec,
    policy: &dyn Policy,
    ens: &StateEnsemble,
    paths: &[PathBundle],
    engine: Engine,
    opts: &FixedPointOptions,
) -> Result<Vec<Vec<f64>>> {
    match engine {
        Engine::Bsde => {
            let sol = solve_bsde(model, ens, paths, &opts.bsde)?;
            Ok(adjoint_bsde::hv_values(model, ens, &sol))
        }
        Engine::Malliavin => {
            let adj = sec3_adjoint(model, policy, ens, paths, opts.sec3)?;
            adjoint_mall::hv_values(model, ens, &adj)
        }
    }
}

/// Conditional expectation of `H_v` given the observation, for any policy.
pub fn stationarity_at(
    model: &ModelSpec,
    policy: &dyn Policy,
    paths: &[PathBundle],
    engine: Engine,
    opts: &FixedPointOptions,
) -> Result<StationarityReport> {
    let ens = simulate_state(model, policy, paths)?;
    let hv = hv_for(model, policy, &ens, paths, engine, opts)?;
    conditional_profile(&ens, &hv, &opts.estimator)
}

fn weighted_rms(ens: &StateEnsemble, i: usize, f: impl Fn(f64) -> f64) -> f64 {
    let num: Vec<f64> = ens
        .paths
        .iter()
        .map(|s| s.rho[i] * f(s.y[i]).powi(2))
        .collect();
    (pairwise_sum(&num) / pairwise_sum(&ens.rho_at(i))).sqrt()
}

/// Damped fixed point of `u = M - E[H_v - rho l_v | Y] / (O E[rho | Y])`.
pub fn solve_fixed_point(
    model: &ModelSpec,
    paths: &[PathBundle],
    engine: Engine,
    opts: &FixedPointOptions,
) -> Result<LqSolveReport> {
    let grid = paths
        .first()
        .ok_or_else(|| Error::Usage("fixed point needs paths".into()))?
        .grid;
    let rc = model.running;
    if !(rc.control_weight > 0.0) {
        return Err(Error::Config("control weight must be positive".into()));
    }
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(Error::Config(format!(
            "damping must lie in (0, 1], got {}",
            opts.damping
        )));
    }
    let n = grid.steps;
    let start = ControlPolicy::constant(n, rc.benchmark, model.controls);
    let base_ens = simulate_state(model, &start, paths)?;
    let baselines = vec![Baseline {
        name: "benchmark".into(),
        cost: cost_of(model, &base_ens),
    }];

    let mut policy = start;
    let mut sweeps = Vec::new();
    let mut converged = is_control_free(model);
    let mut note = if converged {
        "control-free dynamics: u = M".to_string()
    } else {
        String::new()
    };
    let mut prev_contrib: Option<Vec<f64>> = None;
    let mut rises = 0;
    for sweep in 1..=opts.max_sweeps {
        if converged {
            break;
        }
        let ens = simulate_state(model, &policy, paths)?;
        let contrib = cost_contributions(model, &ens);
        let cost = cost_of(model, &ens);
        if let Some(prev) = &prev_contrib {
            let (d, se) = paired_difference(&contrib, prev)?;
            rises = if d > 3.0 * se { rises + 1 } else { 0 };
        }
        let hv = hv_for(model, &policy, &ens, paths, engine, opts)?;
        let yf: Vec<f64> = (0..n)
            .map(|i| ens.weighted_mean_of(i, |x| model.f(x)))
            .collect();
        let mut knots = Vec::with_capacity(n);
        let mut change = 0.0f64;
        let mut mean_control = Vec::with_capacity(n);
        for i in 0..n {
            let t = grid.time(i);
            let y = ens.y_at(i);
            let proj = opts.estimator.projector(&y, i)?;
            let num: Vec<f64> = ens
                .paths
                .iter()
                .zip(&hv[i])
                .map(|(s, h)| h - s.rho[i] * model.l_v(t, s.x[i], yf[i], s.controls[i]))
                .collect();
            let f_num = proj.fit(&num)?.values;
            let f_rho = proj.fit(&ens.rho_at(i))?.values;
            if f_rho.iter().any(|r| !(*r > 0.0)) {
                return Err(Error::Estimator {
                    step: i,
                    msg: "conditional density estimate is not positive".into(),
                });
            }
            let target: Vec<f64> = f_num
                .iter()
                .zip(&f_rho)
                .map(|(a, r)| rc.benchmark - a / (rc.control_weight * r))
                .collect();
            let formula = proj.coefficients(&target)?;
            let old = policy.knots[i];
            let new: [f64; 3] =
                [0, 1, 2].map(|d| (1.0 - opts.damping) * old[d] + opts.damping * formula[d]);
            let raw = |k: [f64; 3], y: f64| model.controls.clip(k[0] + k[1] * y + k[2] * y * y);
            change = change.max(weighted_rms(&ens, i, |y| raw(new, y) - raw(old, y)));
            let mc: Vec<f64> = ens.paths.iter().map(|s| s.rho[i] * s.controls[i]).collect();
            mean_control.push(pairwise_sum(&mc) / pairwise_sum(&ens.rho_at(i)));
            knots.push(new);
        }
        sweeps.push(SweepRecord {
            sweep,
            cost: cost.value,
            cost_se: cost.se,
            change,
            mean_control,
        });
        if rises >= 2 {
            note = format!("cost rose beyond noise in two consecutive sweeps (sweep {sweep})");
            break;
        }
        policy = ControlPolicy {
            knots,
            bounds: model.controls,
        };
        prev_contrib = Some(contrib);
        if change < opts.tol {
            converged = true;
            note = format!("converged after {sweep} sweeps");
        }
    }
    if !converged && note.is_empty() {
        note = format!("no convergence within {} sweeps", opts.max_sweeps);
    }
    let ens = simulate_state(model, &policy, paths)?;
    let cost = cost_of(model, &ens);
    let hv = hv_for(model, &policy, &ens, paths, engine, opts)?;
    let stationarity = Some(conditional_profile(&ens, &hv, &opts.estimator)?);
    Ok(LqSolveReport {
        engine,
        sweeps,
        policy,
        cost,
        baselines,
        stationarity,
        converged,
        note,
    })
}

/// Fixed point of the control formula built from `(p, q, R)`.
pub fn lq_fixed_point(
    spec: &LqSpec,
    levy: &LevyMeasure,
    paths: &[PathBundle],
    opts: &FixedPointOptions,
) -> Result<LqSolveReport> {
    solve_fixed_point(&spec.model(levy)?, paths, Engine::Bsde, opts)
}

/// Fixed point of the control formula built from `q`, `D q` and the jump
/// difference of `q`.
pub fn lq_sec3_control(
    spec: &Sec3LqSpec,
    levy: &LevyMeasure,
    paths: &[PathBundle],
    opts: &FixedPointOptions,
) -> Result<LqSolveReport> {
    solve_fixed_point(&spec.model(levy)?, paths, Engine::Malliavin, opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RiccatiComparison {
    pub oracle_cost: f64,
    /// Monte Carlo cost of the oracle schedule on the same paths.
    pub oracle_mc: CostEstimate,
    /// `J(policy) - J(oracle schedule)` on common paths.
    pub cost_gap: f64,
    pub cost_gap_se: f64,
    /// Density-weighted `L2(dt)` distance between the controls.
    pub control_gap: f64,
}

pub fn compare_with_riccati(
    spec: &LqSpec,
    levy: &LevyMeasure,
    policy: &dyn Policy,
    paths: &[PathBundle],
) -> Result<RiccatiComparison> {
    let model = spec.model(levy)?;
    let grid = paths
        .first()
        .ok_or_else(|| Error::Usage("comparison needs paths".into()))?
        .grid;
    let oracle = RiccatiOracle::solve(spec, levy, &grid)?;
    let sched = oracle.schedule(&grid);
    let oracle_policy = ControlPolicy::schedule(&sched, model.controls);
    let e_or = simulate_state(&model, &oracle_policy, paths)?;
    let e_u = simulate_state(&model, policy, paths)?;
    let (gap, se) = paired_difference(
        &cost_contributions(&model, &e_u),
        &cost_contributions(&model, &e_or),
    )?;
    let mut l2 = 0.0;
    for (i, v) in sched.iter().enumerate() {
        let num: Vec<f64> = e_u
            .paths
            .iter()
            .map(|s| s.rho[i] * (s.controls[i] - v).powi(2))
            .collect();
        l2 += grid.dt() * pairwise_sum(&num) / pairwise_sum(&e_u.rho_at(i));
    }
    Ok(RiccatiComparison {
        oracle_cost: oracle.cost,
        oracle_mc: cost_of(&model, &e_or),
        cost_gap: gap,
        cost_gap_se: se,
        control_gap: l2.sqrt(),
    })
}
