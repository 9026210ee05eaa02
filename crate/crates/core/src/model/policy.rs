use serde::{Deserialize, Serialize};

use super::ControlSet;
use crate::error::{Error, Result};
use crate::paths::TimeGrid;

/// A control rule held constant on each grid cell. The value on cell `i`
/// may only look at the observation at the left node `t_i`, which makes
/// every implementation adapted to the observation filtration.
pub trait Policy: Sync {
    fn control(&self, step: usize, y_now: f64) -> f64;
}

impl<F: Fn(usize, f64) -> f64 + Sync> Policy for F {
    fn control(&self, step: usize, y_now: f64) -> f64 {
        self(step, y_now)
    }
}

/// Per-cell coefficients on the features `{1, Y(t_i), Y(t_i)^2}`, clipped to `bounds`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlPolicy {
    pub knots: Vec<[f64; 3]>,
    pub bounds: ControlSet,
}

impl ControlPolicy {
    pub fn constant(steps: usize, c: f64, bounds: ControlSet) -> Self {
        ControlPolicy {
            knots: vec![[c, 0.0, 0.0]; steps],
            bounds,
        }
    }

    /// Deterministic schedule `u(t_i) = values[i]`.
    pub fn schedule(values: &[f64], bounds: ControlSet) -> Self {
        ControlPolicy {
            knots: values.iter().map(|&c| [c, 0.0, 0.0]).collect(),
            bounds,
        }
    }

    #[inline]
    pub fn raw(&self, step: usize, y_now: f64) -> f64 {
        let k = &self.knots[step.min(self.knots.len() - 1)];
        k[0] + k[1] * y_now + k[2] * y_now * y_now
    }

    pub fn steps(&self) -> usize {
        self.knots.len()
    }
}

impl Policy for ControlPolicy {
    #[inline]
    fn control(&self, step: usize, y_now: f64) -> f64 {
        self.bounds.clip(self.raw(step, y_now))
    }
}

/// `clip(base + eps * direction)`.
pub struct Perturbed<'a> {
    pub base: &'a dyn Policy,
    pub direction: &'a dyn Policy,
    pub eps: f64,
    pub bounds: ControlSet,
}

impl Policy for Perturbed<'_> {
    #[inline]
    fn control(&self, step: usize, y_now: f64) -> f64 {
        self.bounds
            .clip(self.base.control(step, y_now) + self.eps * self.direction.control(step, y_now))
    }
}

/// `factor * inner`, unclipped. Handy for directions.
pub struct Scaled<'a> {
    pub inner: &'a dyn Policy,
    pub factor: f64,
}

impl Policy for Scaled<'_> {
    #[inline]
    fn control(&self, step: usize, y_now: f64) -> f64 {
        self.factor * self.inner.control(step, y_now)
    }
}

/// Control in force at grid time `t`, given the observation levels
/// `y_path[0..=i]` at the nodes up to `t`. At the horizon the last cell's
/// value is held.
pub fn eval_policy(policy: &dyn Policy, y_path: &[f64], t: f64, grid: &TimeGrid) -> Result<f64> {
    let node = grid.node(t)?;
    if y_path.len() < node + 1 {
        return Err(Error::Domain(format!(
            "observation prefix has {} nodes, time {t} needs {}",
            y_path.len(),
            node + 1
        )));
    }
    let step = node.min(grid.steps - 1);
    Ok(policy.control(step, y_path[step]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_policy_everywhere() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let p = ControlPolicy::constant(4, 0.7, ControlSet::unbounded());
        for i in 0..=4 {
            let y = vec![0.3; 5];
            assert_eq!(eval_policy(&p, &y, g.time(i), &g).unwrap(), 0.7);
        }
    }

    #[test]
    fn clipping_to_upper_bound() {
        let p = ControlPolicy {
            knots: vec![[5.0, 1.0, 1.0]; 3],
            bounds: ControlSet::interval(-1.0, 1.0),
        };
        assert_eq!(p.control(1, 2.0), 1.0);
    }

    #[test]
    fn depends_only_on_prefix() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let p = ControlPolicy {
            knots: vec![[0.1, 0.5, -0.2]; 4],
            bounds: ControlSet::unbounded(),
        };
        let a = [0.0, 0.1, 0.3, 0.9, -1.0];
        let b = [0.0, 0.1, 0.3, -2.0, 4.0];
        let t = g.time(2);
        assert_eq!(
            eval_policy(&p, &a, t, &g).unwrap(),
            eval_policy(&p, &b, t, &g).unwrap()
        );
        assert_eq!(
            eval_policy(&p, &a[..3], t, &g).unwrap(),
            eval_policy(&p, &a, t, &g).unwrap()
        );
        assert!(eval_policy(&p, &a[..2], t, &g).is_err());
    }

    #[test]
    fn perturbed_clips() {
        let base = ControlPolicy::constant(2, 0.9, ControlSet::unbounded());
        let dir = ControlPolicy::constant(2, 1.0, ControlSet::unbounded());
        let p = Perturbed {
            base: &base,
            direction: &dir,
            eps: 0.5,
            bounds: ControlSet::interval(0.0, 1.0),
        };
        assert_eq!(p.control(0, 0.0), 1.0);
    }
}
