//! Deterministic-control optimum of the unobserved mean-field LQ problem.
//!
//! With `h = 0` the observation carries no information, so admissible
//! controls are deterministic. Writing `m = E[x]`, `V = Var[x]`:
//!
//! ```text
//! m' = (A+B) m + C v
//! V' = alpha V + (a m + F v)^2 + sum r z^2 (s m + I v)^2,  alpha = 2A + D^2 + sum r z^2 S^2
//! ```
//!
//! with `a = D+E`, `s = S+K`. The variance cost folds into the weight
//! `-Phi' = alpha Phi + L`, `Phi(T) = N`, leaving a scalar tracking problem in
//! `m` solved by a Riccati pair `(P, psi)`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::LqSpec;
use crate::paths::{LevyMeasure, TimeGrid};

/// Refinement of the oracle grid relative to the simulation grid.
pub const REFINE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
struct Coef {
    ab: f64,
    c: f64,
    f: f64,
    alpha: f64,
    a: f64,
    s: f64,
    i: f64,
    jz2: f64,
    l: f64,
    o: f64,
    m: f64,
}

impl Coef {
    /// `(Q, Sx, R)` of the reduced problem given the variance weight.
    fn weights(&self, phi: f64) -> (f64, f64, f64) {
        let q = phi * (self.a * self.a + self.jz2 * self.s * self.s);
        let sx = phi * (self.a * self.f + self.jz2 * self.s * self.i);
        let r = phi * (self.f * self.f + self.jz2 * self.i * self.i) + self.o;
        (q, sx, r)
    }

    /// Backward derivative `d/ds` of `(Phi, P, psi)`, `s = T - t`.
    fn backward(&self, y: [f64; 3]) -> [f64; 3] {
        let [phi, p, psi] = y;
        let (q, sx, r) = self.weights(phi);
        let k = sx + self.c * p;
        [
            self.alpha * phi + self.l,
            q + 2.0 * self.ab * p - k * k / r,
            self.ab * psi - k * (self.c * psi - self.o * self.m) / r,
        ]
    }

    fn control(&self, y: [f64; 3], m: f64) -> f64 {
        let [phi, p, psi] = y;
        let (_, sx, r) = self.weights(phi);
        -((sx + self.c * p) * m + self.c * psi - self.o * self.m) / r
    }

    /// Forward derivative of `(m, V, running cost)`.
    fn forward(&self, z: [f64; 3], v: f64) -> [f64; 3] {
        let [m, var, _] = z;
        let e1 = self.a * m + self.f * v;
        let e2 = self.s * m + self.i * v;
        [
            self.ab * m + self.c * v,
            self.alpha * var + e1 * e1 + self.jz2 * e2 * e2,
            0.5 * (self.l * var + self.o * (v - self.m) * (v - self.m)),
        ]
    }
}

fn axpy(y: [f64; 3], h: f64, k: [f64; 3]) -> [f64; 3] {
    [y[0] + h * k[0], y[1] + h * k[1], y[2] + h * k[2]]
}

fn coefficients(spec: &LqSpec, levy: &LevyMeasure) -> Result<Coef> {
    levy.validate()?;
    let jz2: f64 = levy.marks.iter().map(|mk| mk.rate * mk.z * mk.z).sum();
    let sxx = spec.state_jump;
    Ok(Coef {
        ab: spec.state_drift + spec.mean_drift,
        c: spec.control_drift,
        f: spec.control_vol,
        alpha: 2.0 * spec.state_drift + spec.state_vol * spec.state_vol + jz2 * sxx * sxx,
        a: spec.state_vol + spec.mean_vol,
        s: spec.state_jump + spec.mean_jump,
        i: spec.control_jump,
        jz2,
        l: spec.deviation_weight,
        o: spec.control_weight,
        m: spec.benchmark,
    })
}

/// Exact cost of a deterministic control `v(t)` by RK4 on `steps` intervals.
pub fn schedule_cost(
    spec: &LqSpec,
    levy: &LevyMeasure,
    horizon: f64,
    steps: usize,
    v: impl Fn(f64) -> f64,
) -> Result<f64> {
    let c = coefficients(spec, levy)?;
    let dt = horizon / steps as f64;
    let mut z = [spec.x0, 0.0, 0.0];
    for j in 0..steps {
        let t = j as f64 * dt;
        let k1 = c.forward(z, v(t));
        let k2 = c.forward(axpy(z, 0.5 * dt, k1), v(t + 0.5 * dt));
        let k3 = c.forward(axpy(z, 0.5 * dt, k2), v(t + 0.5 * dt));
        let k4 = c.forward(axpy(z, dt, k3), v(t + dt));
        z = [0, 1, 2].map(|d| z[d] + dt / 6.0 * (k1[d] + 2.0 * k2[d] + 2.0 * k3[d] + k4[d]));
    }
    Ok(z[2] + 0.5 * spec.terminal_weight * z[1])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiccatiOracle {
    pub horizon: f64,
    /// Fine intervals.
    pub steps: usize,
    #[serde(skip)]
    coef: Coef,
    /// `(Phi, P, psi)` at half-step nodes, `2 steps + 1` entries.
    backward: Vec<[f64; 3]>,
    /// `(m, V, running cost)` at fine nodes.
    forward: Vec<[f64; 3]>,
    pub cost: f64,
}

impl RiccatiOracle {
    /// Oracle at `REFINE` times the resolution of `grid`.
    pub fn solve(spec: &LqSpec, levy: &LevyMeasure, grid: &TimeGrid) -> Result<Self> {
        Self::solve_with(spec, levy, grid.horizon, grid.steps * REFINE)
    }

    pub fn solve_with(
        spec: &LqSpec,
        levy: &LevyMeasure,
        horizon: f64,
        steps: usize,
    ) -> Result<Self> {
        let obs = spec.observation;
        if obs.slope != 0.0 || obs.level != 0.0 {
            return Err(Error::Usage(
                "the oracle covers the unobserved problem only".into(),
            ));
        }
        if spec.controls.min.is_some() || spec.controls.max.is_some() {
            return Err(Error::Usage(
                "the oracle needs unconstrained controls".into(),
            ));
        }
        if !(spec.control_weight > 0.0) || steps == 0 || !(horizon > 0.0) {
            return Err(Error::Config(
                "oracle needs O > 0 and a nonempty horizon".into(),
            ));
        }
        let c = coefficients(spec, levy)?;
        let half = horizon / (2 * steps) as f64;
        let mut backward = vec![[0.0; 3]; 2 * steps + 1];
        backward[2 * steps] = [spec.terminal_weight, 0.0, 0.0];
        for j in (0..2 * steps).rev() {
            let y = backward[j + 1];
            let k1 = c.backward(y);
            let k2 = c.backward(axpy(y, 0.5 * half, k1));
            let k3 = c.backward(axpy(y, 0.5 * half, k2));
            let k4 = c.backward(axpy(y, half, k3));
            backward[j] =
                [0, 1, 2].map(|d| y[d] + half / 6.0 * (k1[d] + 2.0 * k2[d] + 2.0 * k3[d] + k4[d]));
        }
        let dt = 2.0 * half;
        let mut forward = vec![[0.0; 3]; steps + 1];
        forward[0] = [spec.x0, 0.0, 0.0];
        let rhs = |z: [f64; 3], b: [f64; 3]| c.forward(z, c.control(b, z[0]));
        for j in 0..steps {
            let z = forward[j];
            let (b0, bh, b1) = (backward[2 * j], backward[2 * j + 1], backward[2 * j + 2]);
            let k1 = rhs(z, b0);
            let k2 = rhs(axpy(z, 0.5 * dt, k1), bh);
            let k3 = rhs(axpy(z, 0.5 * dt, k2), bh);
            let k4 = rhs(axpy(z, dt, k3), b1);
            forward[j + 1] =
                [0, 1, 2].map(|d| z[d] + dt / 6.0 * (k1[d] + 2.0 * k2[d] + 2.0 * k3[d] + k4[d]));
        }
        let [_, v_t, run] = forward[steps];
        let cost = run + 0.5 * spec.terminal_weight * v_t;
        if !cost.is_finite() {
            return Err(Error::Convergence("Riccati oracle blew up".into()));
        }
        Ok(RiccatiOracle {
            horizon,
            steps,
            coef: c,
            backward,
            forward,
            cost,
        })
    }

    fn locate(&self, t: f64) -> (usize, f64) {
        let x = (t / self.horizon).clamp(0.0, 1.0) * self.steps as f64;
        let j = (x.floor() as usize).min(self.steps - 1);
        (j, x - j as f64)
    }

    fn riccati_at(&self, t: f64) -> [f64; 3] {
        let x = (t / self.horizon).clamp(0.0, 1.0) * (2 * self.steps) as f64;
        let j = (x.floor() as usize).min(2 * self.steps - 1);
        let w = x - j as f64;
        let (a, b) = (self.backward[j], self.backward[j + 1]);
        [0, 1, 2].map(|d| a[d] + w * (b[d] - a[d]))
    }

    fn forward_at(&self, t: f64) -> [f64; 3] {
        let (j, w) = self.locate(t);
        let (a, b) = (self.forward[j], self.forward[j + 1]);
        [0, 1, 2].map(|d| a[d] + w * (b[d] - a[d]))
    }

    /// Weight `Phi(t)` of the variance.
    pub fn variance_weight(&self, t: f64) -> f64 {
        self.riccati_at(t)[0]
    }

    pub fn mean(&self, t: f64) -> f64 {
        self.forward_at(t)[0]
    }

    pub fn variance(&self, t: f64) -> f64 {
        self.forward_at(t)[1]
    }

    /// Optimal control at time `t`.
    pub fn control(&self, t: f64) -> f64 {
        self.coef.control(self.riccati_at(t), self.mean(t))
    }

    /// Mean of the adjoint, `P m + psi`.
    pub fn adjoint_mean(&self, t: f64) -> f64 {
        let [_, p, psi] = self.riccati_at(t);
        p * self.mean(t) + psi
    }

    /// Adjoint along a state value, `Phi (x - m) + P m + psi`.
    pub fn adjoint(&self, t: f64, x: f64) -> f64 {
        self.variance_weight(t) * (x - self.mean(t)) + self.adjoint_mean(t)
    }

    /// Optimal control sampled at the left node of each cell of `grid`.
    pub fn schedule(&self, grid: &TimeGrid) -> Vec<f64> {
        (0..grid.steps)
            .map(|i| self.control(grid.time(i)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uncontrolled_variance_matches_closed_form() {
        // C = F = I = 0, no jumps: V = D^2 x0^2 (e^{alpha t} - 1)/alpha with alpha = 2A + D^2
        let spec = LqSpec {
            control_drift: 0.0,
            control_vol: 0.0,
            control_jump: 0.0,
            ..LqSpec::default()
        };
        let o = RiccatiOracle::solve_with(&spec, &LevyMeasure::none(), 1.0, 200).unwrap();
        let (a, d, x0) = (0.1f64, 0.2f64, 1.0f64);
        for t in [0.25, 0.5, 1.0] {
            let m = x0 * (a * t).exp();
            let alpha = 2.0 * a + d * d;
            // dV/dt = alpha V + D^2 m^2 with m = x0 e^{a t}
            let v = d * d * x0 * x0 * ((alpha * t).exp() - (2.0 * a * t).exp()) / (alpha - 2.0 * a);
            assert!((o.mean(t) - m).abs() < 1e-10);
            assert!(
                (o.variance(t) - v).abs() < 1e-10,
                "{} vs {v}",
                o.variance(t)
            );
            assert_eq!(o.control(t), 0.0);
        }
    }

    #[test]
    fn scalar_tracking_has_known_gain() {
        // no noise acts on the mean level, so the variance ignores the control
        let spec = LqSpec {
            state_vol: 0.0,
            state_jump: 0.0,
            control_vol: 0.0,
            control_jump: 0.0,
            benchmark: 0.4,
            ..LqSpec::default()
        };
        let o = RiccatiOracle::solve_with(&spec, &LevyMeasure::none(), 1.0, 100).unwrap();
        for t in [0.0, 0.3, 0.9] {
            assert!((o.control(t) - 0.4).abs() < 1e-12);
        }
    }

    #[test]
    fn optimum_beats_perturbed_schedules() {
        let levy = LevyMeasure::new(vec![crate::paths::Mark { z: -0.5, rate: 0.3 }]).unwrap();
        let spec = LqSpec {
            mean_drift: 0.2,
            mean_vol: 0.1,
            benchmark: 0.3,
            ..LqSpec::default()
        };
        let o = RiccatiOracle::solve_with(&spec, &levy, 1.0, 400).unwrap();
        let direct = schedule_cost(&spec, &levy, 1.0, 4000, |t| o.control(t)).unwrap();
        assert!((direct - o.cost).abs() < 1e-8, "{direct} vs {}", o.cost);
        for (eps, w) in [(0.1, 1.0), (-0.1, 1.0), (0.1, -2.0)] {
            let j = |e: f64| {
                schedule_cost(&spec, &levy, 1.0, 4000, |t| {
                    o.control(t) + e * w * (1.0 + t)
                })
                .unwrap()
            };
            let (jp, jh) = (j(eps), j(eps / 2.0));
            assert!(jp > o.cost && jh > o.cost);
            // quadratic growth: halving the step quarters the excess
            let ratio = (jp - o.cost) / (jh - o.cost);
            assert!((ratio - 4.0).abs() < 0.05, "{ratio}");
        }
    }

    #[test]
    fn rejects_observed_problem() {
        let mut spec = LqSpec::default();
        spec.observation.slope = 1.0;
        assert!(RiccatiOracle::solve_with(&spec, &LevyMeasure::none(), 1.0, 10).is_err());
    }
}
