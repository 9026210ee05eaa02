//! Monte Carlo cost under either measure and its directional derivative.

use serde::Serialize;

use crate::adjoint_mall::FrozenMeans;
use crate::error::{Error, Result};
use crate::forward::{simulate_variation, simulate_with, Measure, SimOptions, StateEnsemble};
use crate::model::{ControlSet, ModelSpec, Perturbed, Policy};
use crate::paths::PathBundle;
use crate::stats::{mean_se, trapezoid_weight};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostEstimate {
    pub value: f64,
    pub se: f64,
    pub n_paths: usize,
    pub measure: Measure,
}

/// Inner means `E0[f(x(t_i))]` and `E0[g(x(T))]` of one ensemble.
fn inner_means(model: &ModelSpec, ens: &StateEnsemble) -> (Vec<f64>, f64) {
    let n = ens.grid.steps;
    let yf = (0..=n)
        .map(|i| ens.weighted_mean_of(i, |x| model.f(x)))
        .collect();
    (yf, ens.weighted_mean_of(n, |x| model.g(x)))
}

/// Per-path contribution to the cost, inner means taken on the same
/// ensemble. Weighted by the density under the reference measure.
pub fn cost_contributions(model: &ModelSpec, ens: &StateEnsemble) -> Vec<f64> {
    let grid = ens.grid;
    let n = grid.steps;
    let (yf, yg) = inner_means(model, ens);
    ens.paths
        .iter()
        .map(|s| {
            let mut c = s.rho[n] * model.phi(s.x[n], yg);
            for j in 0..=n {
                let w = trapezoid_weight(j, n, grid.dt());
                c += w * s.rho[j] * model.l(grid.time(j), s.x[j], yf[j], s.control_at(j));
            }
            c
        })
        .collect()
}

pub fn cost_of(model: &ModelSpec, ens: &StateEnsemble) -> CostEstimate {
    let ms = mean_se(&cost_contributions(model, ens));
    CostEstimate {
        value: ms.mean,
        se: ms.se,
        n_paths: ens.len(),
        measure: ens.measure,
    }
}

/// Simulate under `measure` and estimate the cost.
pub fn estimate_cost(
    model: &ModelSpec,
    policy: &dyn Policy,
    paths: &[PathBundle],
    measure: Measure,
) -> Result<CostEstimate> {
    let ens = simulate_with(model, policy, paths, measure, SimOptions::default())?;
    Ok(cost_of(model, &ens))
}

/// Difference of two costs on common paths with its paired standard error.
pub fn paired_difference(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::Usage("paired costs need common paths".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let ms = mean_se(&d);
    Ok((ms.mean, ms.se))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GateauxCostRow {
    pub eps: f64,
    pub slope: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GateauxCostReport {
    pub rows: Vec<GateauxCostRow>,
    pub analytic: f64,
    pub analytic_se: f64,
}

impl GateauxCostReport {
    /// Richardson extrapolation of the two smallest steps, assuming they
    /// differ by a factor of two.
    pub fn extrapolated(&self) -> Option<f64> {
        let mut rows = self.rows.clone();
        rows.sort_by(|a, b| a.eps.total_cmp(&b.eps));
        match rows.as_slice() {
            [a, b, ..] => Some(2.0 * a.slope - b.slope),
            _ => None,
        }
    }
}

/// Analytic directional derivative of the cost, per path, from the first
/// variation of the state and the density.
pub fn variation_contributions(
    model: &ModelSpec,
    direction: &dyn Policy,
    ens: &StateEnsemble,
    paths: &[PathBundle],
) -> Result<Vec<f64>> {
    let var = simulate_variation(model, direction, ens, paths)?;
    let grid = ens.grid;
    let n = grid.steps;
    let fz = FrozenMeans::from_ensemble(model, ens);
    let (yf, yg, ly, phiy) = (&fz.cost_mean, fz.terminal_mean, &fz.ly_mean, fz.phi_y_mean);
    Ok(ens
        .paths
        .iter()
        .zip(&var)
        .map(|(s, v)| {
            let xn = s.x[n];
            let mut c = s.rho[n] * (model.phi_x(xn, yg) + model.g_prime(xn) * phiy) * v.x1[n]
                + v.rho1[n] * (model.g(xn) * phiy + model.phi(xn, yg));
            for j in 0..=n {
                let t = grid.time(j);
                let (x, u) = (s.x[j], s.control_at(j));
                let d = direction.control(j.min(n - 1), s.y[j.min(n - 1)]);
                let w = trapezoid_weight(j, n, grid.dt());
                c += w
                    * (s.rho[j]
                        * ((model.l_x(t, x, yf[j], u) + model.f_prime(x) * ly[j]) * v.x1[j]
                            + model.l_v(t, x, yf[j], u) * d)
                        + v.rho1[j] * (model.f(x) * ly[j] + model.l(t, x, yf[j], u)));
            }
            c
        })
        .collect())
}

/// Finite-difference slopes `(J(u + eps d) - J(u))/eps` on common paths,
/// next to the analytic derivative.
pub fn gateaux_of_cost(
    model: &ModelSpec,
    base: &dyn Policy,
    direction: &dyn Policy,
    eps_list: &[f64],
    paths: &[PathBundle],
) -> Result<GateauxCostReport> {
    let opts = SimOptions::default();
    let ens = simulate_with(model, base, paths, Measure::Reweighted, opts)?;
    let c0 = cost_contributions(model, &ens);
    let mut rows = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        if !(eps > 0.0) {
            return Err(Error::Domain(format!("eps must be positive, got {eps}")));
        }
        let pert = Perturbed {
            base,
            direction,
            eps,
            bounds: ControlSet::unbounded(),
        };
        let e = simulate_with(model, &pert, paths, Measure::Reweighted, opts)?;
        let (d, se) = paired_difference(&cost_contributions(model, &e), &c0)?;
        rows.push(GateauxCostRow {
            eps,
            slope: d / eps,
            se: se / eps,
        });
    }
    let an = mean_se(&variation_contributions(model, direction, &ens, paths)?);
    Ok(GateauxCostReport {
        rows,
        analytic: an.mean,
        analytic_se: an.se,
    })
}
