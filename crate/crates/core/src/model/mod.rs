//! Coefficient bundle of the controlled system and its analytic partials.

mod builtin;
mod policy;

pub use builtin::{builtin_model, LqSpec, NonlinearParams, Sec3LqSpec, BUILTIN_NAMES};
pub use policy::{eval_policy, ControlPolicy, Perturbed, Policy, Scaled};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::paths::LevyMeasure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    #[default]
    Linear,
    Tanh,
    Sigmoid,
}

impl Shape {
    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Shape::Linear => x,
            Shape::Tanh => x.tanh(),
            Shape::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    #[inline]
    pub fn deriv(&self, x: f64) -> f64 {
        match self {
            Shape::Linear => 1.0,
            Shape::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Shape::Sigmoid => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 - s)
            }
        }
    }
}

/// `x_coef * shape(x) + y_coef * y + v_coef * v + constant`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Coefficient {
    pub shape: Shape,
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub c: f64,
}

impl Coefficient {
    pub fn linear(x: f64, y: f64, v: f64, c: f64) -> Self {
        Coefficient {
            shape: Shape::Linear,
            x,
            y,
            v,
            c,
        }
    }

    #[inline]
    pub fn value(&self, x: f64, y: f64, v: f64) -> f64 {
        let mut r = self.x * self.shape.eval(x) + self.v * v + self.c;
        // skipped when absent so mean-free models never touch the particle mean
        if self.y != 0.0 {
            r += self.y * y;
        }
        r
    }

    #[inline]
    pub fn dx(&self, x: f64) -> f64 {
        self.x * self.shape.deriv(x)
    }

    pub fn is_zero(&self) -> bool {
        self.x == 0.0 && self.y == 0.0 && self.v == 0.0 && self.c == 0.0
    }
}

/// Observation drift `h(x) = slope * shape(x) + level`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ObservationDrift {
    pub shape: Shape,
    pub slope: f64,
    pub level: f64,
}

impl ObservationDrift {
    pub fn is_zero(&self) -> bool {
        self.slope == 0.0 && self.level == 0.0
    }
}

/// `l = 1/2 L (x - y)^2 + 1/2 O (v - M)^2 + 1/2 Q x^2 + c x + k`,
/// with `y` standing for the mean of `f(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunningCost {
    pub deviation_weight: f64,
    pub control_weight: f64,
    pub benchmark: f64,
    pub state_weight: f64,
    pub linear: f64,
    pub constant: f64,
}

/// `phi = 1/2 N (x - y)^2 + 1/2 Q x^2 + c x`, `y` the mean of `g(x(T))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct TerminalCost {
    pub deviation_weight: f64,
    pub state_weight: f64,
    pub linear: f64,
}

/// Closed interval of admissible control values; `None` means unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ControlSet {
    pub min: Option<f64>,
    pub max: Option<f64>,
}

impl ControlSet {
    pub fn unbounded() -> Self {
        ControlSet::default()
    }

    pub fn interval(min: f64, max: f64) -> Self {
        ControlSet {
            min: Some(min),
            max: Some(max),
        }
    }

    #[inline]
    pub fn clip(&self, v: f64) -> f64 {
        let mut r = v;
        if let Some(hi) = self.max {
            if r > hi {
                r = hi;
            }
        }
        if let Some(lo) = self.min {
            if r < lo {
                r = lo;
            }
        }
        r
    }

    pub fn contains(&self, v: f64) -> bool {
        self.min.is_none_or(|lo| v >= lo) && self.max.is_none_or(|hi| v <= hi)
    }

    pub fn validate(&self) -> Result<()> {
        if let (Some(lo), Some(hi)) = (self.min, self.max) {
            if !(lo <= hi) {
                return Err(Error::Config(format!("empty control set [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

/// Coefficients are time-homogeneous; the `t` arguments are kept so the
/// call sites read like the equations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub drift: Coefficient,
    pub diffusion: Coefficient,
    /// Jump amplitude per unit mark: `gamma(x, y, v, z) = z * jump(x, y, v)`.
    pub jump: Coefficient,
    pub observation: ObservationDrift,
    pub running: RunningCost,
    pub terminal: TerminalCost,
    /// `f` in the running-cost mean.
    pub cost_mean: Shape,
    /// `g` in the terminal-cost mean.
    pub terminal_mean: Shape,
    pub x0: f64,
    pub controls: ControlSet,
    pub mean_field_in_state: bool,
    pub levy: LevyMeasure,
}

impl ModelSpec {
    /// Everything zero except the initial state.
    pub fn zero(x0: f64) -> Self {
        ModelSpec {
            drift: Coefficient::default(),
            diffusion: Coefficient::default(),
            jump: Coefficient::default(),
            observation: ObservationDrift::default(),
            running: RunningCost::default(),
            terminal: TerminalCost::default(),
            cost_mean: Shape::Linear,
            terminal_mean: Shape::Linear,
            x0,
            controls: ControlSet::unbounded(),
            mean_field_in_state: false,
            levy: LevyMeasure::none(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.levy.validate()?;
        self.controls.validate()?;
        if !self.x0.is_finite() {
            return Err(Error::Config("x0 must be finite".into()));
        }
        let ys = [self.drift.y, self.diffusion.y, self.jump.y];
        if !self.mean_field_in_state && ys.iter().any(|&c| c != 0.0) {
            return Err(Error::Config(
                "mean-field coefficients set on a model without mean field in the state".into(),
            ));
        }
        if self.running.control_weight < 0.0 || self.running.deviation_weight < 0.0 {
            return Err(Error::Config("cost weights must be nonnegative".into()));
        }
        Ok(())
    }

    /// True when the particle mean actually enters the dynamics.
    pub fn state_depends_on_mean(&self) -> bool {
        self.mean_field_in_state
            && (self.drift.y != 0.0 || self.diffusion.y != 0.0 || self.jump.y != 0.0)
    }

    pub fn n_marks(&self) -> usize {
        self.levy.marks.len()
    }

    #[inline]
    pub fn b(&self, _t: f64, x: f64, y: f64, v: f64) -> f64 {
        self.drift.value(x, y, v)
    }
    #[inline]
    pub fn b_x(&self, _t: f64, x: f64, _y: f64, _v: f64) -> f64 {
        self.drift.dx(x)
    }
    #[inline]
    pub fn b_y(&self, _t: f64, _x: f64, _y: f64, _v: f64) -> f64 {
        self.drift.y
    }
    #[inline]
    pub fn b_v(&self, _t: f64, _x: f64, _y: f64, _v: f64) -> f64 {
        self.drift.v
    }

    #[inline]
    pub fn sigma(&self, _t: f64, x: f64, y: f64, v: f64) -> f64 {
        self.diffusion.value(x, y, v)
    }
    #[inline]
    pub fn sigma_x(&self, _t: f64, x: f64, _y: f64, _v: f64) -> f64 {
        self.diffusion.dx(x)
    }
    #[inline]
    pub fn sigma_y(&self, _t: f64, _x: f64, _y: f64, _v: f64) -> f64 {
        self.diffusion.y
    }
    #[inline]
    pub fn sigma_v(&self, _t: f64, _x: f64, _y: f64, _v: f64) -> f64 {
        self.diffusion.v
    }

    #[inline]
    pub fn gamma(&self, _t: f64, x: f64, y: f64, v: f64, mark: usize) -> f64 {
        self.levy.marks[mark].z * self.jump.value(x, y, v)
    }
    #[inline]
    pub fn gamma_x(&self, _t: f64, x: f64, _y: f64, _v: f64, mark: usize) -> f64 {
        self.levy.marks[mark].z * self.jump.dx(x)
    }
    #[inline]
    pub fn gamma_y(&self, _t: f64, _x: f64, _y: f64, _v: f64, mark: usize) -> f64 {
        self.levy.marks[mark].z * self.jump.y
    }
    #[inline]
    pub fn gamma_v(&self, _t: f64, _x: f64, _y: f64, _v: f64, mark: usize) -> f64 {
        self.levy.marks[mark].z * self.jump.v
    }

    #[inline]
    pub fn h(&self, _t: f64, x: f64) -> f64 {
        let o = &self.observation;
        if o.slope == 0.0 {
            return o.level;
        }
        o.slope * o.shape.eval(x) + o.level
    }
    #[inline]
    pub fn h_x(&self, _t: f64, x: f64) -> f64 {
        let o = &self.observation;
        if o.slope == 0.0 {
            return 0.0;
        }
        o.slope * o.shape.deriv(x)
    }

    #[inline]
    pub fn l(&self, _t: f64, x: f64, y: f64, v: f64) -> f64 {
        let c = &self.running;
        let dev = x - y;
        let ctl = v - c.benchmark;
        0.5 * c.deviation_weight * dev * dev
            + 0.5 * c.control_weight * ctl * ctl
            + 0.5 * c.state_weight * x * x
            + c.linear * x
            + c.constant
    }
    #[inline]
    pub fn l_x(&self, _t: f64, x: f64, y: f64, _v: f64) -> f64 {
        let c = &self.running;
        c.deviation_weight * (x - y) + c.state_weight * x + c.linear
    }
    #[inline]
    pub fn l_y(&self, _t: f64, x: f64, y: f64, _v: f64) -> f64 {
        -self.running.deviation_weight * (x - y)
    }
    #[inline]
    pub fn l_v(&self, _t: f64, _x: f64, _y: f64, v: f64) -> f64 {
        self.running.control_weight * (v - self.running.benchmark)
    }

    #[inline]
    pub fn phi(&self, x: f64, y: f64) -> f64 {
        let c = &self.terminal;
        let dev = x - y;
        0.5 * c.deviation_weight * dev * dev + 0.5 * c.state_weight * x * x + c.linear * x
    }
    #[inline]
    pub fn phi_x(&self, x: f64, y: f64) -> f64 {
        let c = &self.terminal;
        c.deviation_weight * (x - y) + c.state_weight * x + c.linear
    }
    #[inline]
    pub fn phi_y(&self, x: f64, y: f64) -> f64 {
        -self.terminal.deviation_weight * (x - y)
    }

    #[inline]
    pub fn f(&self, x: f64) -> f64 {
        self.cost_mean.eval(x)
    }
    #[inline]
    pub fn f_prime(&self, x: f64) -> f64 {
        self.cost_mean.deriv(x)
    }
    #[inline]
    pub fn g(&self, x: f64) -> f64 {
        self.terminal_mean.eval(x)
    }
    #[inline]
    pub fn g_prime(&self, x: f64) -> f64 {
        self.terminal_mean.deriv(x)
    }

    /// Evaluate a symbol at a point; used by the partial-derivative audit.
    pub fn symbol(&self, s: Symbol, p: Point) -> f64 {
        let Point { t, x, y, v, mark } = p;
        match s {
            Symbol::B => self.b(t, x, y, v),
            Symbol::Bx => self.b_x(t, x, y, v),
            Symbol::By => self.b_y(t, x, y, v),
            Symbol::Bv => self.b_v(t, x, y, v),
            Symbol::Sigma => self.sigma(t, x, y, v),
            Symbol::SigmaX => self.sigma_x(t, x, y, v),
            Symbol::SigmaY => self.sigma_y(t, x, y, v),
            Symbol::SigmaV => self.sigma_v(t, x, y, v),
            Symbol::Gamma => self.gamma(t, x, y, v, mark),
            Symbol::GammaX => self.gamma_x(t, x, y, v, mark),
            Symbol::GammaY => self.gamma_y(t, x, y, v, mark),
            Symbol::GammaV => self.gamma_v(t, x, y, v, mark),
            Symbol::H => self.h(t, x),
            Symbol::Hx => self.h_x(t, x),
            Symbol::L => self.l(t, x, y, v),
            Symbol::Lx => self.l_x(t, x, y, v),
            Symbol::Ly => self.l_y(t, x, y, v),
            Symbol::Lv => self.l_v(t, x, y, v),
            Symbol::Phi => self.phi(x, y),
            Symbol::PhiX => self.phi_x(x, y),
            Symbol::PhiY => self.phi_y(x, y),
            Symbol::F => self.f(x),
            Symbol::FPrime => self.f_prime(x),
            Symbol::G => self.g(x),
            Symbol::GPrime => self.g_prime(x),
        }
    }

    /// Largest relative gap between each analytic partial and a central
    /// difference of its parent symbol over the given points.
    pub fn partial_audit(&self, points: &[Point]) -> Vec<(Symbol, f64)> {
        let mut out = Vec::new();
        for &(partial, parent, var) in Symbol::PARTIALS {
            if self.n_marks() == 0 && parent == Symbol::Gamma {
                continue;
            }
            let mut worst = 0.0f64;
            for &p in points {
                let fd = central_difference(|q| self.symbol(parent, q), p, var);
                let an = self.symbol(partial, p);
                let rel = (fd - an).abs() / an.abs().max(1.0);
                worst = worst.max(rel);
            }
            out.push((partial, worst));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub mark: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    X,
    Y,
    V,
}

fn central_difference(f: impl Fn(Point) -> f64, p: Point, var: Var) -> f64 {
    let h = 1e-5;
    let (mut a, mut b) = (p, p);
    match var {
        Var::X => {
            a.x += h;
            b.x -= h;
        }
        Var::Y => {
            a.y += h;
            b.y -= h;
        }
        Var::V => {
            a.v += h;
            b.v -= h;
        }
    }
    (f(a) - f(b)) / (2.0 * h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Symbol {
    B,
    Bx,
    By,
    Bv,
    Sigma,
    SigmaX,
    SigmaY,
    SigmaV,
    Gamma,
    GammaX,
    GammaY,
    GammaV,
    H,
    Hx,
    L,
    Lx,
    Ly,
    Lv,
    Phi,
    PhiX,
    PhiY,
    F,
    FPrime,
    G,
    GPrime,
}

impl Symbol {
    pub const ALL: &'static [Symbol] = &[
        Symbol::B,
        Symbol::Bx,
        Symbol::By,
        Symbol::Bv,
        Symbol::Sigma,
        Symbol::SigmaX,
        Symbol::SigmaY,
        Symbol::SigmaV,
        Symbol::Gamma,
        Symbol::GammaX,
        Symbol::GammaY,
        Symbol::GammaV,
        Symbol::H,
        Symbol::Hx,
        Symbol::L,
        Symbol::Lx,
        Symbol::Ly,
        Symbol::Lv,
        Symbol::Phi,
        Symbol::PhiX,
        Symbol::PhiY,
        Symbol::F,
        Symbol::FPrime,
        Symbol::G,
        Symbol::GPrime,
    ];

    /// (partial, parent, variable) triples.
    pub const PARTIALS: &'static [(Symbol, Symbol, Var)] = &[
        (Symbol::Bx, Symbol::B, Var::X),
        (Symbol::By, Symbol::B, Var::Y),
        (Symbol::Bv, Symbol::B, Var::V),
        (Symbol::SigmaX, Symbol::Sigma, Var::X),
        (Symbol::SigmaY, Symbol::Sigma, Var::Y),
        (Symbol::SigmaV, Symbol::Sigma, Var::V),
        (Symbol::GammaX, Symbol::Gamma, Var::X),
        (Symbol::GammaY, Symbol::Gamma, Var::Y),
        (Symbol::GammaV, Symbol::Gamma, Var::V),
        (Symbol::Hx, Symbol::H, Var::X),
        (Symbol::Lx, Symbol::L, Var::X),
        (Symbol::Ly, Symbol::L, Var::Y),
        (Symbol::Lv, Symbol::L, Var::V),
        (Symbol::PhiX, Symbol::Phi, Var::X),
        (Symbol::PhiY, Symbol::Phi, Var::Y),
        (Symbol::FPrime, Symbol::F, Var::X),
        (Symbol::GPrime, Symbol::G, Var::X),
    ];
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_derivatives() {
        for s in [Shape::Linear, Shape::Tanh, Shape::Sigmoid] {
            for &x in &[-2.0, -0.3, 0.0, 0.7, 3.0] {
                let fd = (s.eval(x + 1e-6) - s.eval(x - 1e-6)) / 2e-6;
                assert!((fd - s.deriv(x)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn clip_and_contains() {
        let u = ControlSet::interval(-1.0, 2.0);
        assert_eq!(u.clip(5.0), 2.0);
        assert_eq!(u.clip(-5.0), -1.0);
        assert_eq!(u.clip(0.5), 0.5);
        assert!(u.contains(2.0) && !u.contains(2.1));
        assert_eq!(ControlSet::unbounded().clip(1e9), 1e9);
        assert!(ControlSet::interval(1.0, 0.0).validate().is_err());
    }

    #[test]
    fn mean_coefficients_need_flag() {
        let mut m = ModelSpec::zero(1.0);
        m.drift.y = 0.5;
        assert!(m.validate().is_err());
        m.mean_field_in_state = true;
        assert!(m.validate().is_ok());
        assert!(m.state_depends_on_mean());
    }

    #[test]
    fn every_symbol_has_an_evaluator() {
        let m = ModelSpec::zero(0.0);
        let p = Point {
            t: 0.0,
            x: 0.0,
            y: 0.0,
            v: 0.0,
            mark: 0,
        };
        for &s in Symbol::ALL {
            if matches!(
                s,
                Symbol::Gamma | Symbol::GammaX | Symbol::GammaY | Symbol::GammaV
            ) {
                continue;
            }
            assert!(m.symbol(s, p).is_finite());
        }
        // every partial's parent is itself a listed symbol
        for &(a, b, _) in Symbol::PARTIALS {
            assert!(Symbol::ALL.contains(&a) && Symbol::ALL.contains(&b));
        }
    }
}
