//! Least-squares projections used by the backward solver and by the
//! observation-conditional estimator.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_RIDGE: f64 = 1e-8;
pub const MAX_CONDITION: f64 = 1e12;

/// Regression features over the state `x` and observation `Y` at one time.
///
/// The particle mean of the state is the same number on every path, so it
/// adds nothing beyond the intercept and is not a separate column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    /// `{1, x, Y}`
    Linear,
    /// `{1, x, Y, x^2, xY, Y^2}`
    #[default]
    Quadratic,
}

impl Basis {
    pub fn columns(&self, x: &[f64], y: &[f64]) -> Vec<Vec<f64>> {
        let mut cols = vec![x.to_vec(), y.to_vec()];
        if let Basis::Quadratic = self {
            cols.push(x.iter().map(|a| a * a).collect());
            cols.push(x.iter().zip(y).map(|(a, b)| a * b).collect());
            cols.push(y.iter().map(|b| b * b).collect());
        }
        cols
    }
}

/// Features `{1, Y, Y^2}` of the observation at one time.
pub fn observation_columns(y: &[f64]) -> Vec<Vec<f64>> {
    vec![y.to_vec(), y.iter().map(|b| b * b).collect()]
}

/// Factorised normal equations for a fixed design, reusable across targets.
///
/// Columns are centred and scaled internally; columns with (numerically)
/// zero spread are dropped, which happens e.g. at t = 0 where every path
/// shares the same state.
#[derive(Debug, Clone)]
pub struct Projector {
    n: usize,
    q: usize,
    design: Vec<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    cond: f64,
    step: usize,
    /// `(original column, centre, scale)` of each retained column.
    kept: Vec<(usize, f64, f64)>,
    n_columns: usize,
}

#[derive(Debug, Clone)]
pub struct Fitted {
    pub values: Vec<f64>,
    pub residual_var: f64,
    /// Standard error of a fitted value, `sqrt(q * residual_var / n)`.
    pub se: f64,
}

impl Projector {
    /// `columns` excludes the intercept, which is always present.
    pub fn new(columns: &[Vec<f64>], ridge: f64, step: usize) -> Result<Self> {
        let n = columns.first().map(|c| c.len()).unwrap_or(0);
        if n < 2 {
            return Err(Error::Estimator {
                step,
                msg: format!("need at least 2 samples, got {n}"),
            });
        }
        let mut kept: Vec<(&Vec<f64>, f64, f64)> = Vec::new();
        let mut kept_index = Vec::new();
        for (c, col) in columns.iter().enumerate() {
            if col.len() != n {
                return Err(Error::Estimator {
                    step,
                    msg: "feature columns differ in length".into(),
                });
            }
            if col.iter().any(|v| !v.is_finite()) {
                return Err(Error::Estimator {
                    step,
                    msg: "non-finite feature".into(),
                });
            }
            let m = crate::stats::mean(col);
            let dev: Vec<f64> = col.iter().map(|v| (v - m) * (v - m)).collect();
            let sd = (crate::stats::pairwise_sum(&dev) / n as f64).sqrt();
            if sd > 1e-10 * (1.0 + m.abs()) {
                kept.push((col, m, sd));
                kept_index.push((c, m, sd));
            }
        }
        let q = kept.len() + 1;
        let mut design = vec![0.0; n * q];
        for k in 0..n {
            design[k * q] = 1.0;
            for (j, (col, m, sd)) in kept.iter().enumerate() {
                design[k * q + j + 1] = (col[k] - m) / sd;
            }
        }
        let mut gram = DMatrix::<f64>::zeros(q, q);
        for k in 0..n {
            let row = &design[k * q..(k + 1) * q];
            for a in 0..q {
                for b in a..q {
                    gram[(a, b)] += row[a] * row[b];
                }
            }
        }
        for a in 0..q {
            for b in a..q {
                let v = gram[(a, b)] / n as f64;
                gram[(a, b)] = v;
                gram[(b, a)] = v;
            }
            // the intercept is orthogonal to the centred columns and stays unshrunk
            if a > 0 {
                gram[(a, a)] += ridge;
            }
        }
        let eig = gram.clone().symmetric_eigenvalues();
        let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| {
            (lo.min(e), hi.max(e))
        });
        let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        if !(cond <= MAX_CONDITION) {
            return Err(Error::Estimator {
                step,
                msg: format!("ill-conditioned design (condition number {cond:e})"),
            });
        }
        let chol = gram.cholesky().ok_or_else(|| Error::Estimator {
            step,
            msg: "normal equations are not positive definite".into(),
        })?;
        Ok(Projector {
            n,
            q,
            design,
            chol,
            cond,
            step,
            kept: kept_index,
            n_columns: columns.len(),
        })
    }

    pub fn condition_number(&self) -> f64 {
        self.cond
    }

    pub fn n_features(&self) -> usize {
        self.q
    }

    /// Coefficients in the original coordinates, intercept first; dropped
    /// columns get zero.
    pub fn coefficients(&self, target: &[f64]) -> Result<Vec<f64>> {
        let beta = self.solve(target)?;
        let mut out = vec![0.0; self.n_columns + 1];
        out[0] = beta[0];
        for (j, &(c, m, sd)) in self.kept.iter().enumerate() {
            out[c + 1] = beta[j + 1] / sd;
            out[0] -= beta[j + 1] * m / sd;
        }
        Ok(out)
    }

    fn solve(&self, target: &[f64]) -> Result<DVector<f64>> {
        let (n, q) = (self.n, self.q);
        if target.len() != n {
            return Err(Error::Estimator {
                step: self.step,
                msg: "target length differs from design".into(),
            });
        }
        if target.iter().any(|v| !v.is_finite()) {
            return Err(Error::Estimator {
                step: self.step,
                msg: "non-finite regression target".into(),
            });
        }
        let mut rhs = DVector::<f64>::zeros(q);
        for k in 0..n {
            let row = &self.design[k * q..(k + 1) * q];
            for a in 0..q {
                rhs[a] += row[a] * target[k];
            }
        }
        rhs /= n as f64;
        Ok(self.chol.solve(&rhs))
    }

    pub fn fit(&self, target: &[f64]) -> Result<Fitted> {
        let (n, q) = (self.n, self.q);
        let beta = self.solve(target)?;
        let mut values = vec![0.0; n];
        let mut rss = 0.0;
        for k in 0..n {
            let row = &self.design[k * q..(k + 1) * q];
            let mut v = 0.0;
            for a in 0..q {
                v += row[a] * beta[a];
            }
            values[k] = v;
            rss += (target[k] - v) * (target[k] - v);
        }
        let dof = (n.saturating_sub(q)).max(1) as f64;
        let residual_var = rss / dof;
        Ok(Fitted {
            values,
            residual_var,
            se: (q as f64 * residual_var / n as f64).sqrt(),
        })
    }
}

/// Regression estimate of an observation-conditional expectation.
#[derive(Debug, Clone)]
pub struct ConditionalFit {
    pub fitted: Vec<f64>,
    pub se: f64,
    pub mean: f64,
    pub min: f64,
    /// Root mean square of the fitted values.
    pub l2: f64,
}

/// Least-squares projection on `{1, Y(t), Y(t)^2}` at one grid time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionalEstimator {
    pub ridge: f64,
}

impl Default for ConditionalEstimator {
    fn default() -> Self {
        ConditionalEstimator {
            ridge: DEFAULT_RIDGE,
        }
    }
}

impl ConditionalEstimator {
    pub fn projector(&self, y: &[f64], step: usize) -> Result<Projector> {
        Projector::new(&observation_columns(y), self.ridge, step)
    }

    pub fn fit(&self, y: &[f64], target: &[f64], step: usize) -> Result<ConditionalFit> {
        let proj = self.projector(y, step)?;
        Ok(summarize(proj.fit(target)?))
    }
}

pub(crate) fn summarize(f: Fitted) -> ConditionalFit {
    let sq: Vec<f64> = f.values.iter().map(|v| v * v).collect();
    ConditionalFit {
        mean: crate::stats::mean(&f.values),
        min: f.values.iter().cloned().fold(f64::INFINITY, f64::min),
        l2: crate::stats::mean(&sq).sqrt(),
        se: f.se,
        fitted: f.values,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coefficients_are_in_original_coordinates() {
        let y: Vec<f64> = (0..50).map(|i| 3.0 + i as f64 / 7.0).collect();
        let target: Vec<f64> = y.iter().map(|b| 1.5 - 2.0 * b + 0.25 * b * b).collect();
        let proj = ConditionalEstimator { ridge: 0.0 }
            .projector(&y, 0)
            .unwrap();
        let c = proj.coefficients(&target).unwrap();
        for (got, want) in c.iter().zip([1.5, -2.0, 0.25]) {
            assert!((got - want).abs() < 1e-6, "{c:?}");
        }
        let flat = vec![2.0; 10];
        let proj = ConditionalEstimator::default().projector(&flat, 0).unwrap();
        assert_eq!(proj.coefficients(&[4.0; 10]).unwrap(), vec![4.0, 0.0, 0.0]);
    }

    #[test]
    fn recovers_exact_quadratic() {
        let y: Vec<f64> = (0..200).map(|i| (i as f64 - 100.0) / 37.0).collect();
        let target: Vec<f64> = y.iter().map(|b| 1.5 - 2.0 * b + 0.25 * b * b).collect();
        let fit = ConditionalEstimator::default().fit(&y, &target, 0).unwrap();
        for (f, t) in fit.fitted.iter().zip(&target) {
            assert!((f - t).abs() < 1e-6);
        }
        assert!(fit.se < 1e-6);
    }

    #[test]
    fn constant_features_are_dropped() {
        let y = vec![0.0; 50];
        let target: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let proj = ConditionalEstimator::default().projector(&y, 0).unwrap();
        assert_eq!(proj.n_features(), 1);
        let f = proj.fit(&target).unwrap();
        assert!((f.values[0] - 24.5).abs() < 1e-9);
    }

    #[test]
    fn non_finite_target_names_step() {
        let y: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let mut t = y.clone();
        t[3] = f64::NAN;
        match ConditionalEstimator::default().fit(&y, &t, 7) {
            Err(Error::Estimator { step, .. }) => assert_eq!(step, 7),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn collinear_columns_stay_solvable() {
        let x: Vec<f64> = (0..100).map(|i| i as f64 / 10.0).collect();
        let cols = Basis::Quadratic.columns(&x, &x);
        let proj = Projector::new(&cols, DEFAULT_RIDGE, 3).unwrap();
        let target: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let f = proj.fit(&target).unwrap();
        for (a, b) in f.values.iter().zip(&target) {
            assert!((a - b).abs() < 1e-4);
        }
        assert!(proj.condition_number() < MAX_CONDITION);
    }
}
