//! Derivative-free policy search, the independent baseline for the
//! fixed-point solvers.

use serde::Serialize;

use crate::cost::{cost_of, CostEstimate};
use crate::error::{Error, Result};
use crate::forward::simulate_state;
use crate::model::{ControlPolicy, ModelSpec};
use crate::paths::PathBundle;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NelderMeadOptions {
    pub max_evals: usize,
    pub initial_step: f64,
    /// Stop once the simplex values spread less than this.
    pub f_tol: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        NelderMeadOptions {
            max_evals: 400,
            initial_step: 0.5,
            f_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    /// False when the budget ran out first.
    pub converged: bool,
}

/// Standard Nelder-Mead with reflection 1, expansion 2, contraction 1/2 and
/// shrink 1/2.
pub fn nelder_mead(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x0: &[f64],
    opts: NelderMeadOptions,
) -> Result<NelderMeadResult> {
    let d = x0.len();
    if d == 0 {
        return Err(Error::Usage("nothing to optimise".into()));
    }
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| -> Result<f64> {
        *evals += 1;
        let v = f(x)?;
        Ok(if v.is_finite() { v } else { f64::INFINITY })
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(d + 1);
    simplex.push((x0.to_vec(), eval(x0, &mut evals)?));
    for k in 0..d {
        let mut x = x0.to_vec();
        x[k] += opts.initial_step;
        let fx = eval(&x, &mut evals)?;
        simplex.push((x, fx));
    }
    let mut converged = false;
    while evals < opts.max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (best, worst) = (simplex[0].1, simplex[d].1);
        if (worst - best).abs() <= opts.f_tol * (1.0 + best.abs()) {
            converged = true;
            break;
        }
        let mut centroid = vec![0.0; d];
        for (x, _) in &simplex[..d] {
            for (c, xi) in centroid.iter_mut().zip(x) {
                *c += xi / d as f64;
            }
        }
        let toward = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[d].0)
                .map(|(c, w)| c + t * (w - c))
                .collect()
        };
        let xr = toward(-1.0);
        let fr = eval(&xr, &mut evals)?;
        if fr < simplex[0].1 {
            let xe = toward(-2.0);
            let fe = eval(&xe, &mut evals)?;
            simplex[d] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[d - 1].1 {
            simplex[d] = (xr, fr);
        } else {
            let (xc, fc) = if fr < worst {
                let xc = toward(-0.5);
                let fc = eval(&xc, &mut evals)?;
                (xc, fc)
            } else {
                let xc = toward(0.5);
                let fc = eval(&xc, &mut evals)?;
                (xc, fc)
            };
            if fc < fr.min(worst) {
                simplex[d] = (xc, fc);
            } else {
                let x_best = simplex[0].0.clone();
                for (x, fx) in simplex.iter_mut().skip(1) {
                    for (xi, b) in x.iter_mut().zip(&x_best) {
                        *xi = b + 0.5 * (*xi - b);
                    }
                    *fx = eval(x, &mut evals)?;
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, f) = simplex.swap_remove(0);
    Ok(NelderMeadResult {
        x,
        f,
        evals,
        converged,
    })
}

/// Deterministic schedule linearly interpolated between `knots.len()`
/// equally spaced knot times.
pub fn knot_schedule(knots: &[f64], steps: usize, horizon: f64) -> Vec<f64> {
    let k = knots.len();
    if k == 1 {
        return vec![knots[0]; steps];
    }
    (0..steps)
        .map(|i| {
            let t = i as f64 * horizon / steps as f64;
            let x = t / horizon * (k - 1) as f64;
            let j = (x.floor() as usize).min(k - 2);
            let w = x - j as f64;
            knots[j] + w * (knots[j + 1] - knots[j])
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SearchOptions {
    pub knots: usize,
    pub nelder_mead: NelderMeadOptions,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            knots: 6,
            nelder_mead: NelderMeadOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DirectSearchResult {
    pub policy: ControlPolicy,
    pub knots: Vec<f64>,
    pub cost: CostEstimate,
    pub evals: usize,
    pub budget_exhausted: bool,
}

/// Minimise the Monte Carlo cost over deterministic knot schedules on common
/// paths, starting from the constant `start`.
pub fn direct_search(
    model: &ModelSpec,
    paths: &[PathBundle],
    start: f64,
    opts: SearchOptions,
) -> Result<DirectSearchResult> {
    let grid = paths
        .first()
        .ok_or_else(|| Error::Usage("direct search needs paths".into()))?
        .grid;
    if opts.knots == 0 {
        return Err(Error::Config("need at least one knot".into()));
    }
    let policy_of = |k: &[f64]| {
        ControlPolicy::schedule(&knot_schedule(k, grid.steps, grid.horizon), model.controls)
    };
    let objective = |k: &[f64]| -> Result<f64> {
        let ens = simulate_state(model, &policy_of(k), paths)?;
        Ok(cost_of(model, &ens).value)
    };
    let res = nelder_mead(objective, &vec![start; opts.knots], opts.nelder_mead)?;
    let policy = policy_of(&res.x);
    let cost = cost_of(model, &simulate_state(model, &policy, paths)?);
    Ok(DirectSearchResult {
        policy,
        knots: res.x,
        cost,
        evals: res.evals,
        budget_exhausted: !res.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimises_rosenbrock() {
        let rosen = |x: &[f64]| Ok((1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2));
        let opts = NelderMeadOptions {
            max_evals: 2000,
            initial_step: 0.5,
            f_tol: 1e-14,
        };
        let r = nelder_mead(rosen, &[-1.2, 1.0], opts).unwrap();
        assert!(r.converged);
        assert!(
            (r.x[0] - 1.0).abs() < 1e-3 && (r.x[1] - 1.0).abs() < 1e-3,
            "{:?}",
            r.x
        );
    }

    #[test]
    fn budget_is_flagged() {
        let quad = |x: &[f64]| Ok(x.iter().map(|v| v * v).sum());
        let opts = NelderMeadOptions {
            max_evals: 10,
            ..Default::default()
        };
        let r = nelder_mead(quad, &[1.0, 2.0, 3.0], opts).unwrap();
        assert!(!r.converged);
        assert!(r.f <= 14.0);
    }

    #[test]
    fn knot_schedule_interpolates() {
        assert_eq!(knot_schedule(&[1.0, 3.0], 4, 1.0), vec![1.0, 1.5, 2.0, 2.5]);
        assert_eq!(knot_schedule(&[2.0], 3, 1.0), vec![2.0; 3]);
    }
}
