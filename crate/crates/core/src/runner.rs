//! Experiment runner: a declarative config selects one pipeline, which
//! produces CSV tables and a list of pass/fail checks.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adjoint_bsde::{self, solve_bsde, variational_inequality, BsdeOptions};
use crate::adjoint_mall::{
    conditional_profile, fundamental_solution, sec3_adjoint, DerivativeMode, Sec3Options,
    StationarityReport,
};
use crate::cost::{cost_contributions, cost_of, estimate_cost, gateaux_of_cost, paired_difference};
use crate::error::{Error, Result};
use crate::forward::{
    estimate_rho_mean, gateaux_residual_on, homogeneous_variation, simulate_state, Measure,
};
use crate::lq::{
    compare_with_riccati, direct_search, solve_fixed_point, stationarity_at, Engine,
    FixedPointOptions, RiccatiOracle, SearchOptions,
};
use crate::malliavin::{
    verify_duality_brownian, verify_duality_poisson, BrownianIntegrand, CompensatedIntegral,
    DualityReport, Integrator, IteratedIntegral, JumpCount, JumpIntegrand, Kernel, PathFunctional,
    StateFunctional, StateOutput, TerminalPower,
};
use crate::model::{
    builtin_model, Coefficient, ControlPolicy, ControlSet, LqSpec, ModelSpec, Policy, Sec3LqSpec,
};
use crate::paths::{generate_paths, Driver, LevyMeasure, Mark, PathBundle, TimeGrid};
use crate::regression::{Basis, ConditionalEstimator};
use crate::stats::{log_log_slope, mean, mean_se, weighted_mean};

/// Multiplier on standard errors in every statistical check.
pub const Z: f64 = 3.0;
pub const VARIATION_SLOPE: (f64, f64) = (2.0, 0.2);
pub const TRANSPORT_SLOPE: (f64, f64) = (1.0, 0.2);
pub const TRANSPORT_STEPS: [usize; 3] = [25, 50, 100];
/// Relative tolerance for the flow property of `G`.
pub const FLOW_TOL: f64 = 1e-12;
/// Relative tolerance of constant-coefficient `G` against the exponential.
pub const EXP_TOL: f64 = 1e-13;
/// `O(dt)` constants of the bands, measured at T = 1 on the shipped models.
pub const C_ADJOINT: f64 = 0.1;
pub const C_RICCATI_ADJOINT: f64 = 0.1;
pub const C_COST: f64 = 0.1;
pub const C_CONTROL: f64 = 0.5;
pub const C_STATIONARITY: f64 = 0.25;
/// Shift applied to a converged control in the contrast experiments.
pub const PERTURBATION: f64 = 0.5;
pub const ORDERING_SHIFTS: [f64; 2] = [0.25, -0.25];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pipeline {
    DualitySuite,
    GateauxSuite,
    Sec3Adjoint,
    BsdeSuite,
    LqSolve,
    CrossCheck,
}

pub const PIPELINES: [(Pipeline, &str, &str); 6] = [
    (
        Pipeline::DualitySuite,
        "duality-suite",
        "Brownian and Poisson duality formulas on the fixture catalogue",
    ),
    (
        Pipeline::GateauxSuite,
        "gateaux-suite",
        "first-variation rates and the cost derivative against finite differences",
    ),
    (
        Pipeline::Sec3Adjoint,
        "sec3-adjoint",
        "closed-form adjoint, flow of G and stationarity of H_v",
    ),
    (
        Pipeline::BsdeSuite,
        "bsde-suite",
        "regression BSDE solver, Hamiltonian and variational inequality",
    ),
    (
        Pipeline::LqSolve,
        "lq-solve",
        "fixed-point LQ control with oracle and stationarity checks",
    ),
    (
        Pipeline::CrossCheck,
        "cross-check",
        "measure equivalence, cross-engine adjoints and direct search",
    ),
];

/// `(name, description)` of every pipeline, in a fixed order.
pub fn list_pipelines() -> Vec<(&'static str, &'static str)> {
    PIPELINES.iter().map(|(_, n, d)| (*n, *d)).collect()
}

impl Pipeline {
    pub fn name(&self) -> &'static str {
        PIPELINES
            .iter()
            .find(|(p, _, _)| p == self)
            .map(|(_, n, _)| *n)
            .unwrap_or("?")
    }

    fn default_model(&self) -> &'static str {
        match self {
            Pipeline::DualitySuite | Pipeline::GateauxSuite | Pipeline::CrossCheck => {
                "bounded_nonlinear"
            }
            Pipeline::Sec3Adjoint => "lq_section3",
            Pipeline::BsdeSuite | Pipeline::LqSolve => "lq_section4",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    #[serde(default)]
    pub params: serde_json::Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub horizon: f64,
    pub steps: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            horizon: 1.0,
            steps: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    pub basis: Basis,
    pub ridge: f64,
    pub damping: f64,
    /// Brownian shift of the derivative operators; `null` for the default.
    pub eps: Option<f64>,
    pub max_sweeps: usize,
    pub tol: f64,
    /// Perturbation sizes of the variation suite.
    pub eps_list: Vec<f64>,
    pub knots: usize,
    pub search_evals: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            basis: Basis::Quadratic,
            ridge: crate::regression::DEFAULT_RIDGE,
            damping: 0.5,
            eps: None,
            max_sweeps: 40,
            tol: 1e-3,
            eps_list: vec![0.1, 0.05, 0.025],
            knots: 6,
            search_evals: 400,
        }
    }
}

fn default_levy() -> LevyMeasure {
    LevyMeasure {
        marks: vec![Mark { z: -0.5, rate: 0.3 }],
    }
}

fn default_paths() -> usize {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub pipeline: Pipeline,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default = "default_levy")]
    pub levy: LevyMeasure,
    #[serde(default = "default_paths")]
    pub n_paths: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg.resolved())
    }

    /// Fill in the pipeline's default model so the written config is complete.
    pub fn resolved(mut self) -> Self {
        if self.model.is_none() {
            self.model = Some(ModelConfig {
                name: self.pipeline.default_model().into(),
                params: serde_json::Value::Object(Default::default()),
            });
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        self.levy.validate()?;
        if self.n_paths < 2 {
            return Err(Error::Config("n_paths must be at least 2".into()));
        }
        let e = &self.estimator;
        if !(e.damping > 0.0 && e.damping <= 1.0) {
            return Err(Error::Config("damping must lie in (0, 1]".into()));
        }
        if !(e.ridge >= 0.0) || !(e.tol > 0.0) || e.max_sweeps == 0 {
            return Err(Error::Config(
                "ridge >= 0, tol > 0 and max_sweeps > 0 required".into(),
            ));
        }
        if matches!(e.eps, Some(v) if !(v > 0.0)) {
            return Err(Error::Config("eps must be positive".into()));
        }
        if e.eps_list.len() < 2 || e.eps_list.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config(
                "eps_list needs at least two positive entries".into(),
            ));
        }
        if e.knots == 0 || e.search_evals == 0 {
            return Err(Error::Config(
                "knots and search_evals must be positive".into(),
            ));
        }
        self.model_spec()?;
        Ok(())
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.grid.horizon, self.grid.steps)
    }

    fn model_config(&self) -> ModelConfig {
        self.clone()
            .resolved()
            .model
            .unwrap_or_else(|| unreachable!())
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let m = self.model_config();
        builtin_model(&m.name, &m.params, &self.levy)
    }

    fn fixed_point_options(&self) -> FixedPointOptions {
        let e = &self.estimator;
        FixedPointOptions {
            max_sweeps: e.max_sweeps,
            damping: e.damping,
            tol: e.tol,
            bsde: self.bsde_options(),
            sec3: Sec3Options {
                eps: e.eps,
                derivatives: DerivativeMode::Needed,
            },
            estimator: ConditionalEstimator { ridge: e.ridge },
        }
    }

    fn bsde_options(&self) -> BsdeOptions {
        BsdeOptions {
            basis: self.estimator.basis,
            ridge: self.estimator.ridge,
            ..Default::default()
        }
    }

    fn lq_spec(&self) -> Result<Option<LqSpec>> {
        let m = self.model_config();
        if m.name != "lq_section4" {
            return Ok(None);
        }
        let v = if m.params.is_null() {
            serde_json::Value::Object(Default::default())
        } else {
            m.params
        };
        serde_json::from_value(v)
            .map(Some)
            .map_err(|e| Error::Config(format!("lq_section4 parameters: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            pass,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table {
    pub name: String,
    pub csv: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunOutput {
    pub tables: Vec<Table>,
    pub checks: Vec<Check>,
    pub notes: Vec<String>,
}

impl RunOutput {
    fn table(&mut self, name: &str, csv: String) {
        self.tables.push(Table {
            name: name.into(),
            csv,
        });
    }

    fn merge(&mut self, other: RunOutput) {
        self.tables.extend(other.tables);
        self.checks.extend(other.checks);
        self.notes.extend(other.notes);
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn summary(&self, cfg: &ExperimentConfig) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "pipeline: {}", cfg.pipeline.name());
        let _ = writeln!(s, "seed: {}", cfg.seed);
        let _ = writeln!(s, "paths: {}", cfg.n_paths);
        let _ = writeln!(s, "grid: T = {}, N = {}", cfg.grid.horizon, cfg.grid.steps);
        for n in &self.notes {
            let _ = writeln!(s, "{n}");
        }
        for c in &self.checks {
            let _ = writeln!(
                s,
                "{} {}: {}",
                if c.pass { "PASS" } else { "FAIL" },
                c.name,
                c.detail
            );
        }
        let _ = writeln!(
            s,
            "result: {}",
            if self.all_pass() {
                "all checks passed"
            } else {
                "some checks failed"
            }
        );
        s
    }
}

/// Execute the pipeline named in `cfg`. Pure: no files are touched.
pub fn run_config(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    match cfg.pipeline {
        Pipeline::DualitySuite => duality_suite(cfg),
        Pipeline::GateauxSuite => gateaux_suite(cfg),
        Pipeline::Sec3Adjoint => sec3_suite(cfg),
        Pipeline::BsdeSuite => bsde_suite(cfg),
        Pipeline::LqSolve => lq_solve(cfg),
        Pipeline::CrossCheck => cross_check(cfg),
    }
}

/// Write tables, the summary and the resolved config into `dir`.
pub fn write_outputs(dir: &Path, cfg: &ExperimentConfig, out: &RunOutput) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for t in &out.tables {
        std::fs::write(dir.join(format!("{}.csv", t.name)), &t.csv)?;
    }
    std::fs::write(dir.join("summary.txt"), out.summary(cfg))?;
    let resolved = serde_json::to_string_pretty(&cfg.clone().resolved())
        .map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(dir.join("config.resolved.json"), resolved + "\n")?;
    Ok(())
}

/// Exit status of a finished run: 0 when every check passes, 1 otherwise.
pub fn exit_status(out: &RunOutput) -> i32 {
    if out.all_pass() {
        0
    } else {
        1
    }
}

fn band(se: f64, c: f64, dt: f64) -> f64 {
    Z * se + c * dt
}

// ---------------------------------------------------------------------------
// duality-suite

/// Functional and integrand pairs for the duality checks.
pub enum Fixture {
    Brownian(Box<dyn PathFunctional>, BrownianIntegrand, Driver),
    Poisson(Box<dyn PathFunctional>, JumpIntegrand),
}

/// The shipped fixture catalogue. `model` supplies the state functionals
/// and must not feed the particle mean into its state.
pub fn duality_fixtures(model: &ModelSpec, grid: &TimeGrid) -> Result<Vec<Fixture>> {
    let levy = model.levy.clone();
    let policy = ControlPolicy::constant(grid.steps, 0.2, ControlSet::unbounded());
    let state = |o| StateFunctional::new(model.clone(), policy.clone(), o);
    let mut f = vec![
        Fixture::Brownian(
            Box::new(TerminalPower {
                driver: Driver::W1,
                power: 3,
            }),
            BrownianIntegrand::Constant(1.0),
            Driver::W1,
        ),
        Fixture::Brownian(
            Box::new(TerminalPower {
                driver: Driver::Y,
                power: 2,
            }),
            BrownianIntegrand::Level(Driver::Y),
            Driver::Y,
        ),
        Fixture::Brownian(
            Box::new(IteratedIntegral {
                order: 2,
                kernel: Kernel::TimeProduct,
                integrator: Integrator::Brownian(Driver::W1),
            }),
            BrownianIntegrand::Level(Driver::W1),
            Driver::W1,
        ),
        Fixture::Brownian(
            Box::new(state(StateOutput::Terminal)?),
            BrownianIntegrand::Constant(1.0),
            Driver::W1,
        ),
        Fixture::Brownian(
            Box::new(state(StateOutput::WeightedTerminal)?),
            BrownianIntegrand::Constant(1.0),
            Driver::Y,
        ),
    ];
    if !levy.is_empty() {
        let nm = levy.len();
        let weights: Vec<f64> = (0..nm).map(|m| 1.0 + m as f64).collect();
        f.push(Fixture::Poisson(
            Box::new(JumpCount {
                mark: None,
                power: 2,
            }),
            JumpIntegrand::PerMark(weights.clone()),
        ));
        f.push(Fixture::Poisson(
            Box::new(CompensatedIntegral {
                weights: weights.clone(),
                levy: levy.clone(),
            }),
            JumpIntegrand::PerMark(vec![1.0; nm]),
        ));
        f.push(Fixture::Poisson(
            Box::new(IteratedIntegral {
                order: 2,
                kernel: Kernel::Constant(1.0),
                integrator: Integrator::Poisson(levy.clone()),
            }),
            JumpIntegrand::PerMark(weights),
        ));
        f.push(Fixture::Poisson(
            Box::new(state(StateOutput::TerminalSquared)?),
            JumpIntegrand::StateLeft(state(StateOutput::Terminal)?),
        ));
    }
    Ok(f)
}

pub fn duality_reports(
    model: &ModelSpec,
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
    eps: Option<f64>,
) -> Result<Vec<(String, DualityReport)>> {
    let mut out = Vec::new();
    for (k, fx) in duality_fixtures(model, &grid)?.into_iter().enumerate() {
        let s = seed.wrapping_add(k as u64);
        let r = match fx {
            Fixture::Brownian(f, h, d) => (
                "brownian",
                verify_duality_brownian(f.as_ref(), h, d, grid, &model.levy, n_paths, s, eps)?,
            ),
            Fixture::Poisson(f, h) => (
                "poisson",
                verify_duality_poisson(f.as_ref(), &h, grid, &model.levy, n_paths, s)?,
            ),
        };
        out.push((r.0.to_string(), r.1));
    }
    Ok(out)
}

fn duality_suite(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let model = cfg.model_spec()?;
    let grid = cfg.grid()?;
    let reports = duality_reports(&model, grid, cfg.n_paths, cfg.seed, cfg.estimator.eps)?;
    let mut out = RunOutput::default();
    let mut csv = String::from("fixture,kind,lhs,rhs,diff,se,pass\n");
    for (kind, r) in &reports {
        let _ = writeln!(
            csv,
            "\"{}\",{},{},{},{},{},{}",
            r.fixture, kind, r.lhs, r.rhs, r.diff, r.se, r.pass
        );
        out.checks.push(Check::new(
            format!("duality {}", r.fixture),
            r.pass,
            format!("|diff| = {:e}, 3 se = {:e}", r.diff.abs(), Z * r.se),
        ));
    }
    // second-order chaos isometry with the n! normalisation
    let paths = generate_paths(grid, &model.levy, cfg.n_paths, cfg.seed.wrapping_add(1000))?;
    let i2: Vec<f64> = paths
        .iter()
        .map(|p| {
            crate::malliavin::iterated_integral(
                2,
                Kernel::Constant(1.0),
                &Integrator::Brownian(Driver::W1),
                p,
            )
            .map(|v| v * v)
        })
        .collect::<Result<_>>()?;
    let ms = mean_se(&i2);
    let t = grid.horizon;
    let want = 2.0 * t * t * (1.0 - 1.0 / grid.steps as f64);
    let _ = writeln!(
        csv,
        "\"E[I2^2]\",isometry,{},{},{},{},{}",
        ms.mean,
        want,
        ms.mean - want,
        ms.se,
        (ms.mean - want).abs() <= Z * ms.se
    );
    out.checks.push(Check::new(
        "chaos isometry E[I2^2]",
        (ms.mean - want).abs() <= Z * ms.se,
        format!("{} vs {} (se {:e})", ms.mean, want, ms.se),
    ));
    out.table("duality", csv);
    Ok(out)
}

// ---------------------------------------------------------------------------
// gateaux-suite

/// Base control and direction of the variation experiments.
pub fn variation_policies(steps: usize) -> (ControlPolicy, impl Policy) {
    let base = ControlPolicy::constant(steps, 0.2, ControlSet::unbounded());
    let dir = move |i: usize, y: f64| 1.0 + 0.5 * (i as f64 / steps as f64) + 0.3 * y.tanh();
    (base, dir)
}

pub fn variation_checks(
    model: &ModelSpec,
    paths: &[PathBundle],
    eps_list: &[f64],
) -> Result<RunOutput> {
    let steps = paths[0].grid.steps;
    let (base, dir) = variation_policies(steps);
    let rows = gateaux_residual_on(model, &base, &dir, eps_list, paths)?;
    let mut out = RunOutput::default();
    let mut csv = String::from("eps,state_residual,density_residual,state_gap\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            r.eps, r.state_residual, r.density_residual, r.state_gap
        );
    }
    out.table("gateaux", csv);
    let eps: Vec<f64> = rows.iter().map(|r| r.eps).collect();
    let gap: Vec<f64> = rows.iter().map(|r| r.state_gap).collect();
    let slope = log_log_slope(&eps, &gap);
    out.checks.push(Check::new(
        "variation rate sup_t E|x^eps - x|^2 ~ eps^2",
        (slope - VARIATION_SLOPE.0).abs() <= VARIATION_SLOPE.1,
        format!("log-log slope {slope:.4}"),
    ));
    let mut sorted = rows.clone();
    sorted.sort_by(|a, b| b.eps.total_cmp(&a.eps));
    let dec =
        |f: fn(&crate::forward::GateauxRow) -> f64| sorted.windows(2).all(|w| f(&w[1]) < f(&w[0]));
    out.checks.push(Check::new(
        "state Gateaux residual decreases",
        dec(|r| r.state_residual),
        format!(
            "{:?}",
            sorted.iter().map(|r| r.state_residual).collect::<Vec<_>>()
        ),
    ));
    out.checks.push(Check::new(
        "density Gateaux residual decreases",
        dec(|r| r.density_residual),
        format!(
            "{:?}",
            sorted
                .iter()
                .map(|r| r.density_residual)
                .collect::<Vec<_>>()
        ),
    ));
    let g = gateaux_of_cost(model, &base, &dir, eps_list, paths)?;
    let mut csv = String::from("eps,slope,se\n");
    for r in &g.rows {
        let _ = writeln!(csv, "{},{},{}", r.eps, r.slope, r.se);
    }
    let _ = writeln!(csv, "0,{},{}", g.analytic, g.analytic_se);
    out.table("cost_gateaux", csv);
    let mut small = g.rows.clone();
    small.sort_by(|a, b| a.eps.total_cmp(&b.eps));
    let extrap = g.extrapolated().unwrap_or(f64::NAN);
    let se = ((2.0 * small[0].se).powi(2) + small[1].se.powi(2) + g.analytic_se.powi(2)).sqrt();
    out.checks.push(Check::new(
        "cost derivative: extrapolated finite difference vs analytic variation",
        (extrap - g.analytic).abs() <= Z * se,
        format!("{extrap} vs {} (3 se = {:e})", g.analytic, Z * se),
    ));
    Ok(out)
}

fn gateaux_suite(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let model = cfg.model_spec()?;
    let paths = generate_paths(cfg.grid()?, &model.levy, cfg.n_paths, cfg.seed)?;
    variation_checks(&model, &paths, &cfg.estimator.eps_list)
}

// ---------------------------------------------------------------------------
// sec3-adjoint

/// Flow property, exponential check and transport rate of `G`.
pub fn flow_checks(
    model: &ModelSpec,
    horizon: f64,
    n_paths: usize,
    seed: u64,
) -> Result<RunOutput> {
    let mut out = RunOutput::default();
    let grid = TimeGrid::new(horizon, 50)?;
    let paths = generate_paths(grid, &model.levy, n_paths.min(500), seed)?;
    let policy = ControlPolicy::constant(grid.steps, 0.1, ControlSet::unbounded());
    let ens = simulate_state(model, &policy, &paths)?;
    let mut worst = 0.0f64;
    for (p, s) in paths.iter().zip(&ens.paths) {
        for (t, u, v) in [(0, 17, 50), (5, 5, 31), (12, 40, 49), (0, 25, 25)] {
            let a = fundamental_solution(model, s, p, t, u)?;
            let b = fundamental_solution(model, s, p, u, v)?;
            let c = fundamental_solution(model, s, p, t, v)?;
            worst = worst.max((a * b - c).abs() / c.abs());
        }
    }
    out.checks.push(Check::new(
        "G flow property at grid points",
        worst <= FLOW_TOL,
        format!("max relative defect {worst:e}"),
    ));
    let a = 0.7;
    let mut cm = ModelSpec::zero(1.0);
    cm.drift = Coefficient::linear(a, 0.0, 0.0, 0.0);
    cm.levy = model.levy.clone();
    let mut worst = 0.0f64;
    for (p, s) in paths.iter().zip(&ens.paths).take(50) {
        for (t, u) in [(0, 50), (10, 37), (3, 4)] {
            let g = fundamental_solution(&cm, s, p, t, u)?;
            let want = (a * (grid.time(u) - grid.time(t))).exp();
            worst = worst.max((g - want).abs() / want);
        }
    }
    out.checks.push(Check::new(
        "constant-coefficient G = exp(a (s - t))",
        worst <= EXP_TOL,
        format!("max relative error {worst:e}"),
    ));
    let mut csv = String::from("steps,dt,mean_square_error,se\n");
    let (mut dts, mut errs) = (Vec::new(), Vec::new());
    for (k, &n) in TRANSPORT_STEPS.iter().enumerate() {
        let g = TimeGrid::new(horizon, n)?;
        let paths = generate_paths(g, &model.levy, n_paths, seed.wrapping_add(1 + k as u64))?;
        let policy = ControlPolicy::constant(n, 0.1, ControlSet::unbounded());
        let ens = simulate_state(model, &policy, &paths)?;
        let start = n / 5;
        let var = homogeneous_variation(model, &ens, &paths, start)?;
        let sq: Vec<f64> = paths
            .iter()
            .zip(&ens.paths)
            .zip(&var)
            .map(|((p, s), v)| Ok((v.x1[n] - fundamental_solution(model, s, p, start, n)?).powi(2)))
            .collect::<Result<_>>()?;
        let ms = mean_se(&sq);
        let _ = writeln!(csv, "{},{},{},{}", n, g.dt(), ms.mean, ms.se);
        dts.push(g.dt());
        errs.push(ms.mean);
    }
    let slope = log_log_slope(&dts, &errs);
    out.checks.push(Check::new(
        "variation transport x1(s) vs G(t, s): mean-square error O(dt)",
        (slope - TRANSPORT_SLOPE.0).abs() <= TRANSPORT_SLOPE.1,
        format!("log-log slope {slope:.4}"),
    ));
    out.table("transport", csv);
    Ok(out)
}

fn engine_label(engine: Engine) -> &'static str {
    match engine {
        Engine::Bsde => "bsde",
        Engine::Malliavin => "malliavin",
    }
}

fn shifted(policy: &ControlPolicy, shift: f64) -> ControlPolicy {
    let mut p = policy.clone();
    for k in p.knots.iter_mut() {
        k[0] += shift;
    }
    p
}

fn stationarity_csv(rep: &StationarityReport) -> String {
    let mut s = String::from("t,residual,mean,min,se\n");
    for r in &rep.rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.t, r.l2, r.mean, r.min, r.se);
    }
    s
}

fn within_band(rep: &StationarityReport, dt: f64) -> (bool, f64) {
    let worst = rep
        .rows
        .iter()
        .map(|r| r.l2 - band(r.se, C_STATIONARITY, dt))
        .fold(f64::NEG_INFINITY, f64::max);
    (worst <= 0.0, worst)
}

/// Stationarity of the fixed-point control with contrasts at shifted controls.
pub fn stationarity_checks(
    model: &ModelSpec,
    paths: &[PathBundle],
    engine: Engine,
    opts: &FixedPointOptions,
    policy: &ControlPolicy,
    at_optimum: &StationarityReport,
) -> Result<RunOutput> {
    let dt = paths[0].grid.dt();
    let mut out = RunOutput::default();
    let (ok, worst) = within_band(at_optimum, dt);
    out.checks.push(Check::new(
        format!(
            "{} stationarity within 3 se + c dt at every t",
            engine_label(engine)
        ),
        ok,
        format!("max excess over band {worst:e}"),
    ));
    let pert = stationarity_at(model, &shifted(policy, PERTURBATION), paths, engine, opts)?;
    let (inside, worst) = within_band(&pert, dt);
    out.checks.push(Check::new(
        format!(
            "{} stationarity violated at control shifted by {PERTURBATION}",
            engine_label(engine)
        ),
        !inside,
        format!("max excess over band {worst:e}"),
    ));
    out.table(
        &format!("stationarity_{}", engine_label(engine)),
        stationarity_csv(at_optimum),
    );
    for shift in ORDERING_SHIFTS {
        let rep = stationarity_at(model, &shifted(policy, shift), paths, engine, opts)?;
        let ordered = rep
            .rows
            .iter()
            .zip(&at_optimum.rows)
            .all(|(p, o)| o.l2 <= p.l2);
        out.checks.push(Check::new(
            format!(
                "{} residual at optimum below residual at shift {shift}",
                engine_label(engine)
            ),
            ordered,
            format!("sup {:e} vs {:e}", at_optimum.sup, rep.sup),
        ));
    }
    Ok(out)
}

fn sec3_suite(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let model = cfg.model_spec()?;
    let grid = cfg.grid()?;
    let mut out = flow_checks(
        &model,
        grid.horizon,
        cfg.n_paths,
        cfg.seed.wrapping_add(500),
    )?;
    let paths = generate_paths(grid, &model.levy, cfg.n_paths, cfg.seed)?;
    let opts = cfg.fixed_point_options();
    let rep = solve_fixed_point(&model, &paths, Engine::Malliavin, &opts)?;
    out.notes.push(format!("fixed point: {}", rep.note));
    out.checks.push(Check::new(
        "fixed point converged",
        rep.converged,
        rep.note.clone(),
    ));
    let ens = simulate_state(&model, &rep.policy, &paths)?;
    let adj = sec3_adjoint(&model, &rep.policy, &ens, &paths, opts.sec3)?;
    let hv = crate::adjoint_mall::hv_values(&model, &ens, &adj)?;
    let st = conditional_profile(&ens, &hv, &opts.estimator)?;
    let mut csv = String::from("t,mean_q,residual_hv,se\n");
    for i in 0..=grid.steps {
        let q: Vec<f64> = adj.iter().map(|a| a.q[i]).collect();
        let (res, se) = st.rows.get(i).map(|r| (r.l2, r.se)).unwrap_or((0.0, 0.0));
        let _ = writeln!(csv, "{},{},{},{}", grid.time(i), mean(&q), res, se);
    }
    out.table("adjoint", csv);
    out.table("sweeps", rep.sweeps_csv());
    out.merge(stationarity_checks(
        &model,
        &paths,
        Engine::Malliavin,
        &opts,
        &rep.policy,
        &st,
    )?);
    Ok(out)
}

// ---------------------------------------------------------------------------
// bsde-suite

fn bsde_suite(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let model = cfg.model_spec()?;
    let grid = cfg.grid()?;
    let paths = generate_paths(grid, &model.levy, cfg.n_paths, cfg.seed)?;
    let spec = cfg.lq_spec()?;
    let oracle = match &spec {
        Some(s) => RiccatiOracle::solve(s, &cfg.levy, &grid).ok(),
        None => None,
    };
    let policy = match &oracle {
        Some(o) => ControlPolicy::schedule(&o.schedule(&grid), model.controls),
        None => ControlPolicy::constant(grid.steps, model.running.benchmark, model.controls),
    };
    let ens = simulate_state(&model, &policy, &paths)?;
    let opts = cfg.bsde_options();
    let sol = solve_bsde(&model, &ens, &paths, &opts)?;
    let mut out = RunOutput::default();
    out.notes.push(format!(
        "policy: {}; mean-field sweeps: {}",
        if oracle.is_some() {
            "Riccati optimum"
        } else {
            "constant benchmark"
        },
        sol.sweeps
    ));
    out.table("bsde", sol.to_csv(&grid.times()));
    let moves_ok = sol.sweep_moves.windows(2).all(|w| w[1] <= w[0]);
    out.checks.push(Check::new(
        "mean-field sweeps move monotonically less",
        moves_ok,
        format!("{:?}", sol.sweep_moves),
    ));
    // expectation of the explicit scheme: intercepts keep the mean exactly
    let n = grid.steps;
    let fz = crate::adjoint_mall::FrozenMeans::from_ensemble(&model, &ens);
    let total: Vec<f64> = ens
        .paths
        .iter()
        .map(|s| {
            let mut v = model.phi(s.x[n], fz.terminal_mean) + model.g(s.x[n]) * fz.phi_y_mean;
            for i in 0..n {
                let t = grid.time(i);
                v += (model.l(t, s.x[i], fz.cost_mean[i], s.controls[i])
                    + model.f(s.x[i]) * fz.ly_mean[i])
                    * grid.dt();
            }
            v
        })
        .collect();
    let ms = mean_se(&total);
    let p0 = mean(&sol.pq.big_p[0]);
    out.checks.push(Check::new(
        "tower property E[P(0)] = E[terminal + int driver]",
        (p0 - ms.mean).abs() <= Z * ms.se + 1e-12,
        format!("{p0} vs {} (se {:e})", ms.mean, ms.se),
    ));
    let est = ConditionalEstimator {
        ridge: cfg.estimator.ridge,
    };
    if let Some(o) = &oracle {
        let mut csv = String::from("t,mean_p,oracle_p,se\n");
        let mut worst = f64::NEG_INFINITY;
        for i in 0..=n {
            let t = grid.time(i);
            let ms = mean_se(&sol.p[i]);
            let want = o.adjoint_mean(t);
            let _ = writeln!(csv, "{},{},{},{}", t, ms.mean, want, ms.se);
            worst = worst.max((ms.mean - want).abs() - band(ms.se, C_RICCATI_ADJOINT, grid.dt()));
        }
        out.table("riccati_adjoint", csv);
        out.checks.push(Check::new(
            "adjoint mean matches the Riccati adjoint",
            worst <= 0.0,
            format!("max excess over band {worst:e}"),
        ));
        let st = adjoint_bsde::stationarity(&model, &ens, &sol, &est)?;
        let (ok, worst) = within_band(&st, grid.dt());
        out.checks.push(Check::new(
            "Hamiltonian stationarity at the Riccati optimum",
            ok,
            format!("max excess over band {worst:e}"),
        ));
        out.table("stationarity_bsde", stationarity_csv(&st));
        let up = shifted(&policy, PERTURBATION);
        let vi = variational_inequality(&model, &ens, &sol, &up, &est)?;
        let (ok, worst) = within_band(&vi.profile, grid.dt());
        out.checks.push(Check::new(
            "variational inequality is an equality at the optimum",
            ok,
            format!("max excess over band {worst:e}"),
        ));
        // at a shifted control, moving back toward the optimum must violate it
        let ens_b = simulate_state(&model, &up, &paths)?;
        let sol_b = solve_bsde(&model, &ens_b, &paths, &opts)?;
        let vi_b = variational_inequality(&model, &ens_b, &sol_b, &policy, &est)?;
        let viol = vi_b
            .profile
            .rows
            .iter()
            .map(|r| -r.mean - band(r.se, C_STATIONARITY, grid.dt()))
            .fold(f64::NEG_INFINITY, f64::max);
        out.checks.push(Check::new(
            "variational inequality violated at a non-optimal control",
            viol > 0.0,
            format!("most negative excess {viol:e}, min {:e}", vi_b.min),
        ));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// lq-solve

fn lq_solve(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let model = cfg.model_spec()?;
    let name = cfg.model_config().name;
    let engine = match name.as_str() {
        "lq_section4" => Engine::Bsde,
        "lq_section3" => Engine::Malliavin,
        other => {
            return Err(Error::Config(format!(
                "lq-solve needs an LQ model, got '{other}'"
            )))
        }
    };
    let grid = cfg.grid()?;
    let paths = generate_paths(grid, &model.levy, cfg.n_paths, cfg.seed)?;
    let opts = cfg.fixed_point_options();
    let rep = solve_fixed_point(&model, &paths, engine, &opts)?;
    let mut out = RunOutput::default();
    let u0 = rep.policy.knots.first().map(|k| k[0]).unwrap_or(f64::NAN);
    out.notes.push(format!(
        "fixed point: {}; sweeps: {}; J = {} (se {})",
        rep.note,
        rep.sweeps.len(),
        rep.cost.value,
        rep.cost.se
    ));
    if rep.sweeps.is_empty() {
        out.notes.push(format!("u = M = {u0}, 0 sweeps"));
    }
    for b in &rep.baselines {
        out.notes.push(format!(
            "baseline {}: J = {} (se {})",
            b.name, b.cost.value, b.cost.se
        ));
    }
    out.checks.push(Check::new(
        "fixed point converged",
        rep.converged,
        rep.note.clone(),
    ));
    let descent = rep
        .sweeps
        .windows(2)
        .all(|w| w[1].cost <= w[0].cost + Z * w[1].cost_se);
    out.checks.push(Check::new(
        "cost descends across sweeps within 3 se",
        descent,
        "",
    ));
    out.table("lq_sweeps", rep.sweeps_csv());
    let ens = simulate_state(&model, &rep.policy, &paths)?;
    let oracle = match cfg.lq_spec()? {
        Some(s) => RiccatiOracle::solve(&s, &cfg.levy, &grid)
            .ok()
            .map(|o| (s, o)),
        None => None,
    };
    let mut csv = String::from("t,mean_control,oracle_control\n");
    for i in 0..grid.steps {
        let t = grid.time(i);
        let u: Vec<f64> = ens.paths.iter().map(|s| s.controls[i]).collect();
        let mc = weighted_mean(&ens.rho_at(i), &u);
        let oc = oracle
            .as_ref()
            .map(|(_, o)| o.control(t))
            .unwrap_or(f64::NAN);
        let _ = writeln!(csv, "{t},{mc},{oc}");
    }
    out.table("lq_control", csv);
    if rep.sweeps.is_empty() {
        return Ok(out);
    }
    if let Some(st) = &rep.stationarity {
        out.merge(stationarity_checks(
            &model,
            &paths,
            engine,
            &opts,
            &rep.policy,
            st,
        )?);
    }
    if let Some((spec, o)) = &oracle {
        let cmp = compare_with_riccati(spec, &cfg.levy, &rep.policy, &paths)?;
        let dt = grid.dt();
        out.checks.push(Check::new(
            "cost matches the Riccati optimum",
            (rep.cost.value - o.cost).abs() <= band(rep.cost.se, C_COST, dt),
            format!("{} vs {} (se {:e})", rep.cost.value, o.cost, rep.cost.se),
        ));
        out.checks.push(Check::new(
            "control within the L2(dt) band of the Riccati control",
            cmp.control_gap <= C_CONTROL * dt,
            format!("gap {:e}, band {:e}", cmp.control_gap, C_CONTROL * dt),
        ));
        out.notes.push(format!(
            "paired gap to the oracle schedule: {} (se {})",
            cmp.cost_gap, cmp.cost_gap_se
        ));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// cross-check

/// Reweighted and direct cost estimates on independent paths, and the mean
/// of the density on the grid.
pub fn girsanov_checks(
    model: &ModelSpec,
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<RunOutput> {
    let mut out = RunOutput::default();
    let a = generate_paths(grid, &model.levy, n_paths, seed)?;
    let b = generate_paths(grid, &model.levy, n_paths, seed.wrapping_add(1))?;
    let (base, _) = variation_policies(grid.steps);
    let rw = estimate_cost(model, &base, &a, Measure::Reweighted)?;
    let di = estimate_cost(model, &base, &b, Measure::Direct)?;
    let se = (rw.se * rw.se + di.se * di.se).sqrt();
    out.checks.push(Check::new(
        "cost under both measures agrees",
        (rw.value - di.value).abs() <= Z * se,
        format!(
            "{} ({}) vs {} ({}), 3 se = {:e}",
            rw.value,
            rw.measure.label(),
            di.value,
            di.measure.label(),
            Z * se
        ),
    ));
    let ens = simulate_state(model, &base, &a)?;
    let mut csv = String::from("t,mean_rho,se\n");
    let mut worst = f64::NEG_INFINITY;
    for t in grid.times() {
        let ms = estimate_rho_mean(&ens, t)?;
        let _ = writeln!(csv, "{},{},{}", t, ms.mean, ms.se);
        worst = worst.max((ms.mean - 1.0).abs() - Z * ms.se);
    }
    out.checks.push(Check::new(
        "E[rho(t)] = 1 at every grid point",
        worst <= 1e-12,
        format!("max excess over 3 se {worst:e}"),
    ));
    out.table("girsanov", csv);
    Ok(out)
}

/// The unobserved, mean-free LQ model on which both adjoints coincide.
pub fn cross_engine_model(levy: &LevyMeasure) -> Result<ModelSpec> {
    let spec = Sec3LqSpec {
        signal_slope: 0.0,
        signal_level: 0.5,
        price_vol: 1.0,
        ..Default::default()
    };
    spec.model(levy)
}

pub fn cross_engine_checks(
    model: &ModelSpec,
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
    eps: Option<f64>,
) -> Result<RunOutput> {
    let paths = generate_paths(grid, &model.levy, n_paths, seed)?;
    let policy = ControlPolicy::constant(grid.steps, 0.3, model.controls);
    let ens = simulate_state(model, &policy, &paths)?;
    let opts = Sec3Options {
        eps,
        derivatives: DerivativeMode::None,
    };
    let adj = sec3_adjoint(model, &policy, &ens, &paths, opts)?;
    let sol = solve_bsde(model, &ens, &paths, &BsdeOptions::default())?;
    let mut out = RunOutput::default();
    let mut csv = String::from("t,mean_q,mean_p,diff,se\n");
    let mut worst = f64::NEG_INFINITY;
    for i in 0..=grid.steps {
        let d: Vec<f64> = adj.iter().zip(&sol.p[i]).map(|(a, p)| a.q[i] - p).collect();
        let q: Vec<f64> = adj.iter().map(|a| a.q[i]).collect();
        let ms = mean_se(&d);
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            grid.time(i),
            mean(&q),
            mean(&sol.p[i]),
            ms.mean,
            ms.se
        );
        worst = worst.max(ms.mean.abs() - band(ms.se, C_ADJOINT, grid.dt()));
    }
    out.table("cross_engine", csv);
    out.checks.push(Check::new(
        "closed-form q and regression p agree in mean",
        worst <= 0.0,
        format!("max excess over band {worst:e}"),
    ));
    Ok(out)
}

/// Fixed point against direct search on an LQ problem; both policies
/// are scored on fresh common paths.
pub fn optimality_checks(
    spec: &LqSpec,
    levy: &LevyMeasure,
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
    opts: &FixedPointOptions,
    search: SearchOptions,
) -> Result<RunOutput> {
    let model = spec.model(levy)?;
    let train = generate_paths(grid, levy, n_paths, seed)?;
    let test = generate_paths(grid, levy, n_paths, seed.wrapping_add(1))?;
    let fp = solve_fixed_point(&model, &train, Engine::Bsde, opts)?;
    let ds = direct_search(&model, &train, spec.benchmark, search)?;
    let ea = simulate_state(&model, &fp.policy, &test)?;
    let eb = simulate_state(&model, &ds.policy, &test)?;
    let (d, se) = paired_difference(
        &cost_contributions(&model, &ea),
        &cost_contributions(&model, &eb),
    )?;
    let (ja, jb) = (cost_of(&model, &ea), cost_of(&model, &eb));
    let mut out = RunOutput::default();
    let mut csv = String::from("policy,cost,se\n");
    let _ = writeln!(csv, "fixed_point,{},{}", ja.value, ja.se);
    let _ = writeln!(csv, "direct_search,{},{}", jb.value, jb.se);
    out.table("optimality", csv);
    out.notes.push(format!(
        "direct search: {} evaluations{}",
        ds.evals,
        if ds.budget_exhausted {
            ", budget exhausted"
        } else {
            ""
        }
    ));
    let combined = (ja.se * ja.se + jb.se * jb.se).sqrt();
    out.notes.push(format!(
        "paired difference J(fixed point) - J(direct search): {d:e} (se {se:e})"
    ));
    out.checks.push(Check::new(
        "J(fixed point) <= J(direct search) + 3 combined se",
        ja.value <= jb.value + Z * combined,
        format!("{} vs {}, 3 se = {:e}", ja.value, jb.value, Z * combined),
    ));
    Ok(out)
}

fn cross_check(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let model = cfg.model_spec()?;
    let grid = cfg.grid()?;
    let mut out = girsanov_checks(&model, grid, cfg.n_paths, cfg.seed)?;
    out.merge(cross_engine_checks(
        &cross_engine_model(&cfg.levy)?,
        grid,
        cfg.n_paths,
        cfg.seed.wrapping_add(10),
        cfg.estimator.eps,
    )?);
    let search = SearchOptions {
        knots: cfg.estimator.knots,
        nelder_mead: crate::lq::search::NelderMeadOptions {
            max_evals: cfg.estimator.search_evals,
            ..Default::default()
        },
    };
    out.merge(optimality_checks(
        &LqSpec::default(),
        &cfg.levy,
        grid,
        cfg.n_paths,
        cfg.seed.wrapping_add(20),
        &cfg.fixed_point_options(),
        search,
    )?);
    Ok(out)
}
