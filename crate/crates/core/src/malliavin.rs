//! Grid Malliavin derivatives and Monte Carlo checks of the two duality
//! formulas.
//!
//! `D_t` is a central difference along the shift of one cell increment,
//! which equals the cell average of the derivative density. `D_{t,z}` is
//! the exact add-one-jump difference.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::forward::{advance_path, Measure, StatePath};
use crate::model::{ControlPolicy, ModelSpec};
use crate::paths::{
    generate_paths, insert_jump, shift_cell, CellNoise, Driver, LevyMeasure, PathBundle, TimeGrid,
};
use crate::stats::mean_se;

/// Default Brownian shift `1e-2 * sqrt(dt)`.
pub fn default_eps(dt: f64) -> f64 {
    1e-2 * dt.sqrt()
}

pub trait PathFunctional: Sync {
    fn label(&self) -> String;
    fn eval(&self, path: &PathBundle) -> Result<f64>;
}

/// `D_t F` per cell for the chosen driver.
pub fn d_brownian(
    f: &dyn PathFunctional,
    path: &PathBundle,
    which: Driver,
    eps: f64,
) -> Result<Vec<f64>> {
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("eps must be positive, got {eps}")));
    }
    (0..path.grid.steps)
        .map(|i| {
            let up = f.eval(&shift_cell(path, which, i, eps))?;
            let dn = f.eval(&shift_cell(path, which, i, -eps))?;
            Ok((up - dn) / (2.0 * eps))
        })
        .collect()
}

/// `D_{t,z} F` at each cell (jump placed mid-cell) and mark, laid out
/// `[cell * n_marks + mark]`.
pub fn d_poisson(f: &dyn PathFunctional, path: &PathBundle) -> Result<Vec<f64>> {
    let base = f.eval(path)?;
    let dt = path.grid.dt();
    let mut out = Vec::with_capacity(path.grid.steps * path.n_marks);
    for i in 0..path.grid.steps {
        let t = path.grid.time(i) + 0.5 * dt;
        for m in 0..path.n_marks {
            out.push(f.eval(&insert_jump(path, t, m)?)? - base);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeField {
    pub dw1: Vec<f64>,
    pub dy: Vec<f64>,
    pub dn: Vec<f64>,
}

pub fn derivative_field(
    f: &dyn PathFunctional,
    path: &PathBundle,
    eps: f64,
) -> Result<DerivativeField> {
    Ok(DerivativeField {
        dw1: d_brownian(f, path, Driver::W1, eps)?,
        dy: d_brownian(f, path, Driver::Y, eps)?,
        dn: d_poisson(f, path)?,
    })
}

/// Central difference of `eval` along one cell increment of a flat noise record.
pub(crate) fn cell_central_difference(
    noise: &mut CellNoise,
    which: Driver,
    cell: usize,
    eps: f64,
    mut eval: impl FnMut(&CellNoise) -> Result<f64>,
) -> Result<f64> {
    noise.shift(which, cell, eps);
    let up = eval(noise);
    noise.shift(which, cell, -2.0 * eps);
    let dn = eval(noise);
    noise.shift(which, cell, eps);
    Ok((up? - dn?) / (2.0 * eps))
}

/// Add-one-jump difference of `eval` on a flat noise record.
pub(crate) fn cell_jump_difference(
    noise: &mut CellNoise,
    cell: usize,
    mark: usize,
    base: f64,
    mut eval: impl FnMut(&CellNoise) -> Result<f64>,
) -> Result<f64> {
    noise.add_jump(cell, mark, 1);
    let v = eval(noise);
    noise.add_jump(cell, mark, -1);
    Ok(v? - base)
}

// ---------------------------------------------------------------------------
// Fixture catalogue

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Constant(pub f64);

impl PathFunctional for Constant {
    fn label(&self) -> String {
        format!("constant {}", self.0)
    }
    fn eval(&self, _: &PathBundle) -> Result<f64> {
        Ok(self.0)
    }
}

/// `W(T)^power` for the chosen driver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TerminalPower {
    pub driver: Driver,
    pub power: i32,
}

impl PathFunctional for TerminalPower {
    fn label(&self) -> String {
        format!("{:?}(T)^{}", self.driver, self.power)
    }
    fn eval(&self, path: &PathBundle) -> Result<f64> {
        Ok(path.terminal(self.driver).powi(self.power))
    }
}

/// `count^power` of the jumps of one mark (all marks when `mark` is `None`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpCount {
    pub mark: Option<usize>,
    pub power: i32,
}

impl PathFunctional for JumpCount {
    fn label(&self) -> String {
        match self.mark {
            Some(m) => format!("count(mark {m})^{}", self.power),
            None => format!("count^{}", self.power),
        }
    }
    fn eval(&self, path: &PathBundle) -> Result<f64> {
        let c = match self.mark {
            Some(m) => path.jump_count(m),
            None => path.jumps.len(),
        };
        Ok((c as f64).powi(self.power))
    }
}

/// `sum_m c_m (N_m(T) - rate_m T)`: the compensated integral of a
/// mark-wise constant integrand.
#[derive(Debug, Clone, PartialEq)]
pub struct CompensatedIntegral {
    pub weights: Vec<f64>,
    pub levy: LevyMeasure,
}

impl PathFunctional for CompensatedIntegral {
    fn label(&self) -> String {
        format!("compensated integral {:?}", self.weights)
    }
    fn eval(&self, path: &PathBundle) -> Result<f64> {
        Ok(self
            .weights
            .iter()
            .enumerate()
            .map(|(m, c)| c * path.compensated_count(m, &self.levy))
            .sum())
    }
}

/// Output of a simulated state path used as a functional.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateOutput {
    Terminal,
    TerminalSquared,
    /// `rho(T) x(T)`
    WeightedTerminal,
}

/// Functional obtained by simulating one path of a model without mean field.
#[derive(Debug, Clone, PartialEq)]
pub struct StateFunctional {
    pub model: ModelSpec,
    pub policy: ControlPolicy,
    pub output: StateOutput,
}

impl StateFunctional {
    pub fn new(model: ModelSpec, policy: ControlPolicy, output: StateOutput) -> Result<Self> {
        if model.state_depends_on_mean() {
            return Err(Error::Usage(
                "state functionals need dynamics without the particle mean".into(),
            ));
        }
        Ok(StateFunctional {
            model,
            policy,
            output,
        })
    }

    pub fn simulate(&self, path: &PathBundle) -> Result<StatePath> {
        let noise = CellNoise::from_path(path);
        let mut s = StatePath::new(path.grid.steps, self.model.x0);
        let mean = vec![0.0; path.grid.steps + 1];
        advance_path(
            &self.model,
            &self.policy,
            &noise,
            &mean,
            &path.grid,
            Measure::Reweighted,
            &mut s,
            0,
        )
        .map_err(|(step, msg)| Error::Simulation {
            path: path.index as usize,
            step,
            msg,
        })?;
        Ok(s)
    }
}

impl PathFunctional for StateFunctional {
    fn label(&self) -> String {
        format!("state {:?}", self.output)
    }
    fn eval(&self, path: &PathBundle) -> Result<f64> {
        let s = self.simulate(path)?;
        let n = path.grid.steps;
        Ok(match self.output {
            StateOutput::Terminal => s.x[n],
            StateOutput::TerminalSquared => s.x[n] * s.x[n],
            StateOutput::WeightedTerminal => s.rho[n] * s.x[n],
        })
    }
}

/// Noise against which an iterated integral is taken.
#[derive(Debug, Clone, PartialEq)]
pub enum Integrator {
    Brownian(Driver),
    /// Compensated jump measure summed over all marks.
    Poisson(LevyMeasure),
}

/// Symmetric kernels on the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kernel {
    Constant(f64),
    /// `k(s, t) = s * t` (order 2) or `k(t) = t` (order 1).
    TimeProduct,
}

impl Kernel {
    fn one(&self, t: f64) -> f64 {
        match self {
            Kernel::Constant(c) => *c,
            Kernel::TimeProduct => t,
        }
    }
    fn two(&self, s: f64, t: f64) -> f64 {
        match self {
            Kernel::Constant(c) => *c,
            Kernel::TimeProduct => s * t,
        }
    }
}

/// `I_n(k)` with the `n!` normalisation: order 2 is
/// `2 * sum_{i<j} k(t_i, t_j) dM_i dM_j` over strictly increasing cells.
pub fn iterated_integral(
    order: usize,
    kernel: Kernel,
    integrator: &Integrator,
    path: &PathBundle,
) -> Result<f64> {
    let grid = path.grid;
    let dm: Vec<f64> = match integrator {
        Integrator::Brownian(d) => path.increments(*d).to_vec(),
        Integrator::Poisson(levy) => {
            let counts = path.cell_counts();
            let dt = grid.dt();
            (0..grid.steps)
                .map(|i| {
                    (0..path.n_marks)
                        .map(|m| counts[i * path.n_marks + m] as f64 - levy.marks[m].rate * dt)
                        .sum()
                })
                .collect()
        }
    };
    match order {
        1 => Ok(dm
            .iter()
            .enumerate()
            .map(|(i, d)| kernel.one(grid.time(i)) * d)
            .sum()),
        2 => {
            let mut acc = 0.0;
            for j in 1..grid.steps {
                let tj = grid.time(j);
                let mut inner = 0.0;
                for (i, d) in dm.iter().enumerate().take(j) {
                    inner += kernel.two(grid.time(i), tj) * d;
                }
                acc += inner * dm[j];
            }
            Ok(2.0 * acc)
        }
        n => Err(Error::Domain(format!(
            "iterated integrals of order {n} are not supported"
        ))),
    }
}

/// Functional wrapper around `iterated_integral`.
#[derive(Debug, Clone, PartialEq)]
pub struct IteratedIntegral {
    pub order: usize,
    pub kernel: Kernel,
    pub integrator: Integrator,
}

impl PathFunctional for IteratedIntegral {
    fn label(&self) -> String {
        format!("I{}({:?})", self.order, self.kernel)
    }
    fn eval(&self, path: &PathBundle) -> Result<f64> {
        iterated_integral(self.order, self.kernel, &self.integrator, path)
    }
}

// ---------------------------------------------------------------------------
// Integrands

/// Adapted integrands for the Brownian duality, evaluated at the left node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BrownianIntegrand {
    Constant(f64),
    /// Level of a driver at `t_i`.
    Level(Driver),
}

impl BrownianIntegrand {
    fn values(&self, path: &PathBundle) -> Vec<f64> {
        match self {
            BrownianIntegrand::Constant(c) => vec![*c; path.grid.steps],
            BrownianIntegrand::Level(d) => {
                let mut c = path.cumulative(*d);
                c.pop();
                c
            }
        }
    }
}

/// Predictable integrands `Psi(t_i, z_m)` for the jump duality.
#[derive(Debug, Clone, PartialEq)]
pub enum JumpIntegrand {
    /// One constant per mark.
    PerMark(Vec<f64>),
    /// `z_m * tanh(x(t_i))` along a simulated state path.
    StateLeft(StateFunctional),
}

impl JumpIntegrand {
    fn values(&self, path: &PathBundle, levy: &LevyMeasure) -> Result<Vec<f64>> {
        let n = path.grid.steps;
        let nm = path.n_marks;
        match self {
            JumpIntegrand::PerMark(c) => {
                if c.len() != nm {
                    return Err(Error::Usage("integrand needs one value per mark".into()));
                }
                Ok((0..n * nm).map(|k| c[k % nm]).collect())
            }
            JumpIntegrand::StateLeft(sf) => {
                let s = sf.simulate(path)?;
                Ok((0..n * nm)
                    .map(|k| levy.marks[k % nm].z * s.x[k / nm].tanh())
                    .collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualityReport {
    pub fixture: String,
    pub lhs: f64,
    pub rhs: f64,
    pub diff: f64,
    /// Standard error of the paired per-path difference.
    pub se: f64,
    pub pass: bool,
}

impl DualityReport {
    fn from_samples(fixture: String, lhs: &[f64], rhs: &[f64]) -> Self {
        let l = mean_se(lhs);
        let r = mean_se(rhs);
        let d: Vec<f64> = lhs.iter().zip(rhs).map(|(a, b)| a - b).collect();
        let ds = mean_se(&d);
        let scale = 1.0 + l.mean.abs().max(r.mean.abs());
        let pass = ds.mean.abs() <= 3.0 * ds.se + 1e-12 * scale;
        DualityReport {
            fixture,
            lhs: l.mean,
            rhs: r.mean,
            diff: ds.mean,
            se: ds.se,
            pass,
        }
    }
}

/// `E[F int h dW] = E[int h D_t F dt]` on fresh paths.
#[allow(clippy::too_many_arguments)]
pub fn verify_duality_brownian(
    f: &dyn PathFunctional,
    integrand: BrownianIntegrand,
    which: Driver,
    grid: TimeGrid,
    levy: &LevyMeasure,
    n_paths: usize,
    seed: u64,
    eps: Option<f64>,
) -> Result<DualityReport> {
    let paths = generate_paths(grid, levy, n_paths, seed)?;
    let eps = eps.unwrap_or_else(|| default_eps(grid.dt()));
    let dt = grid.dt();
    let pairs: Vec<Result<(f64, f64)>> = paths
        .par_iter()
        .map(|p| {
            let h = integrand.values(p);
            let fv = f.eval(p)?;
            let stoch: f64 = h.iter().zip(p.increments(which)).map(|(a, b)| a * b).sum();
            let d = d_brownian(f, p, which, eps)?;
            let det: f64 = h.iter().zip(&d).map(|(a, b)| a * b * dt).sum();
            Ok((fv * stoch, det))
        })
        .collect();
    let (lhs, rhs) = unzip(pairs)?;
    Ok(DualityReport::from_samples(
        format!("{} vs int {:?} d{:?}", f.label(), integrand, which),
        &lhs,
        &rhs,
    ))
}

/// `E[F int int Psi dN~] = E[int int Psi D_{t,z} F mu(dz) dt]` on fresh paths.
pub fn verify_duality_poisson(
    f: &dyn PathFunctional,
    integrand: &JumpIntegrand,
    grid: TimeGrid,
    levy: &LevyMeasure,
    n_paths: usize,
    seed: u64,
) -> Result<DualityReport> {
    let paths = generate_paths(grid, levy, n_paths, seed)?;
    let dt = grid.dt();
    let nm = levy.len();
    let pairs: Vec<Result<(f64, f64)>> = paths
        .par_iter()
        .map(|p| {
            let psi = integrand.values(p, levy)?;
            let counts = p.cell_counts();
            let fv = f.eval(p)?;
            let mut stoch = 0.0;
            for (k, ps) in psi.iter().enumerate() {
                stoch += ps * (counts[k] as f64 - levy.marks[k % nm].rate * dt);
            }
            let d = d_poisson(f, p)?;
            let mut det = 0.0;
            for (k, ps) in psi.iter().enumerate() {
                det += ps * d[k] * levy.marks[k % nm].rate * dt;
            }
            Ok((fv * stoch, det))
        })
        .collect();
    let (lhs, rhs) = unzip(pairs)?;
    let label = match integrand {
        JumpIntegrand::PerMark(c) => format!("{:?}", c),
        JumpIntegrand::StateLeft(_) => "state-dependent".into(),
    };
    Ok(DualityReport::from_samples(
        format!("{} vs int {} dN~", f.label(), label),
        &lhs,
        &rhs,
    ))
}

fn unzip(pairs: Vec<Result<(f64, f64)>>) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut a = Vec::with_capacity(pairs.len());
    let mut b = Vec::with_capacity(pairs.len());
    for p in pairs {
        let (x, y) = p?;
        a.push(x);
        b.push(y);
    }
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::Mark;

    fn setup() -> (LevyMeasure, PathBundle) {
        let levy = LevyMeasure::new(vec![
            Mark { z: -0.5, rate: 0.7 },
            Mark { z: 0.4, rate: 1.5 },
        ])
        .unwrap();
        let g = TimeGrid::new(1.0, 16).unwrap();
        let p = generate_paths(g, &levy, 4, 9).unwrap().remove(3);
        (levy, p)
    }

    #[test]
    fn brownian_derivative_examples() {
        let (_, p) = setup();
        let d = d_brownian(
            &TerminalPower {
                driver: Driver::W1,
                power: 1,
            },
            &p,
            Driver::W1,
            1e-3,
        )
        .unwrap();
        assert!(d.iter().all(|v| (v - 1.0).abs() < 1e-10));
        let d = d_brownian(
            &TerminalPower {
                driver: Driver::W1,
                power: 2,
            },
            &p,
            Driver::W1,
            1e-3,
        )
        .unwrap();
        let w = p.terminal(Driver::W1);
        assert!(d.iter().all(|v| (v - 2.0 * w).abs() < 1e-9));
        let d = d_brownian(
            &TerminalPower {
                driver: Driver::Y,
                power: 1,
            },
            &p,
            Driver::W1,
            1e-3,
        )
        .unwrap();
        assert!(d.iter().all(|&v| v == 0.0));
        assert!(d_brownian(&Constant(1.0), &p, Driver::W1, 0.0).is_err());
    }

    #[test]
    fn poisson_derivative_examples() {
        let (_, p) = setup();
        let d = d_poisson(
            &JumpCount {
                mark: Some(1),
                power: 1,
            },
            &p,
        )
        .unwrap();
        for (k, v) in d.iter().enumerate() {
            assert_eq!(*v, if k % 2 == 1 { 1.0 } else { 0.0 });
        }
        let c = p.jump_count(0) as f64;
        let d = d_poisson(
            &JumpCount {
                mark: Some(0),
                power: 2,
            },
            &p,
        )
        .unwrap();
        assert!(d.iter().step_by(2).all(|&v| v == 2.0 * c + 1.0));
        let d = d_poisson(
            &TerminalPower {
                driver: Driver::W1,
                power: 1,
            },
            &p,
        )
        .unwrap();
        assert!(d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn iterated_integral_examples() {
        let (levy, p) = setup();
        let w = p.terminal(Driver::W1);
        let i1 = iterated_integral(
            1,
            Kernel::Constant(1.0),
            &Integrator::Brownian(Driver::W1),
            &p,
        )
        .unwrap();
        assert!((i1 - w).abs() < 1e-12);
        let i2 = iterated_integral(
            2,
            Kernel::Constant(1.0),
            &Integrator::Brownian(Driver::W1),
            &p,
        )
        .unwrap();
        let qv: f64 = p.dw1.iter().map(|d| d * d).sum();
        assert!((i2 - (w * w - qv)).abs() < 1e-12);
        let ip = iterated_integral(
            1,
            Kernel::Constant(1.0),
            &Integrator::Poisson(levy.clone()),
            &p,
        )
        .unwrap();
        let comp = p.jumps.len() as f64 - levy.total_rate();
        assert!((ip - comp).abs() < 1e-12);
        assert!(
            iterated_integral(3, Kernel::Constant(1.0), &Integrator::Poisson(levy), &p).is_err()
        );
    }

    #[test]
    fn trivial_dualities() {
        let (levy, _) = setup();
        let g = TimeGrid::new(1.0, 10).unwrap();
        let r = verify_duality_brownian(
            &Constant(1.0),
            BrownianIntegrand::Constant(1.0),
            Driver::W1,
            g,
            &levy,
            2000,
            1,
            None,
        )
        .unwrap();
        assert_eq!(r.rhs, 0.0);
        assert!(r.pass);
        let r = verify_duality_poisson(
            &Constant(1.0),
            &JumpIntegrand::PerMark(vec![1.0, -2.0]),
            g,
            &levy,
            2000,
            1,
        )
        .unwrap();
        assert_eq!(r.rhs, 0.0);
        assert!(r.pass);
    }
}
