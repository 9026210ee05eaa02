//! Closed-form adjoint for dynamics without mean field in the state.
//!
//! Everything is assembled pathwise from resimulations of the same path:
//! `Sigma`, `Pi` and `Lambda` are trapezoid sums, `H_x` needs the grid
//! derivatives of `Sigma` and `Pi` at its own time, and `k`, `r` are the
//! derivatives of the whole assembled `q(t)` functional.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::forward::{advance_path, Measure, StateEnsemble, StatePath};
use crate::malliavin::{cell_central_difference, cell_jump_difference, default_eps};
use crate::model::{ModelSpec, Policy};
use crate::paths::{CellNoise, Driver, PathBundle, TimeGrid};
use crate::regression::ConditionalEstimator;
use crate::stats::pairwise_sum;

/// Ensemble expectations that enter the adjoint as constants.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrozenMeans {
    /// Mean of `f(x(t_j))` under the original measure.
    pub cost_mean: Vec<f64>,
    /// Mean of `l_y(t_j)`.
    pub ly_mean: Vec<f64>,
    /// Mean of `g(x(T))`.
    pub terminal_mean: f64,
    /// Mean of `phi_y`.
    pub phi_y_mean: f64,
}

impl FrozenMeans {
    pub fn from_ensemble(model: &ModelSpec, ens: &StateEnsemble) -> Self {
        let n = ens.grid.steps;
        let mut cost_mean = Vec::with_capacity(n + 1);
        let mut ly_mean = Vec::with_capacity(n + 1);
        for j in 0..=n {
            let t = ens.grid.time(j);
            let yf = ens.weighted_mean_of(j, |x| model.f(x));
            let num: Vec<f64> = ens
                .paths
                .iter()
                .map(|p| p.rho[j] * model.l_y(t, p.x[j], yf, p.control_at(j)))
                .collect();
            ly_mean.push(pairwise_sum(&num) / pairwise_sum(&ens.rho_at(j)));
            cost_mean.push(yf);
        }
        let yg = ens.weighted_mean_of(n, |x| model.g(x));
        let num: Vec<f64> = ens
            .paths
            .iter()
            .map(|p| p.rho[n] * model.phi_y(p.x[n], yg))
            .collect();
        FrozenMeans {
            cost_mean,
            ly_mean,
            terminal_mean: yg,
            phi_y_mean: pairwise_sum(&num) / pairwise_sum(&ens.rho_at(n)),
        }
    }
}

/// Which derivatives of `q` to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DerivativeMode {
    /// Only those multiplied by a nonzero control coefficient in `H_v`.
    Needed,
    All,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Sec3Options {
    /// Brownian shift; defaults to `1e-2 sqrt(dt)`.
    pub eps: Option<f64>,
    pub derivatives: DerivativeMode,
}

impl Default for Sec3Options {
    fn default() -> Self {
        Sec3Options {
            eps: None,
            derivatives: DerivativeMode::Needed,
        }
    }
}

/// Adjoint quantities along one path.
#[derive(Debug, Clone, PartialEq)]
pub struct Sec3Adjoint {
    pub sigma: Vec<f64>,
    pub pi: Vec<f64>,
    pub lambda: Vec<f64>,
    pub hx: Vec<f64>,
    /// Cumulative log of the fundamental solution, `G(t_i, t_j) = exp(L_j - L_i)`.
    pub log_flow: Vec<f64>,
    pub q: Vec<f64>,
    /// `D^{W1} q(t_i)`, when computed.
    pub k: Option<Vec<f64>>,
    /// `D_{t_i, z_m} q(t_i)` laid out `[i * n_marks + m]`, when computed.
    pub r: Option<Vec<f64>>,
}

impl Sec3Adjoint {
    pub fn g(&self, i: usize, j: usize) -> f64 {
        (self.log_flow[j] - self.log_flow[i]).exp()
    }

    pub fn theta(&self, i: usize, j: usize) -> f64 {
        self.hx[j] * self.g(i, j)
    }
}

struct Ctx<'a> {
    model: &'a ModelSpec,
    policy: &'a dyn Policy,
    grid: TimeGrid,
    frozen: &'a FrozenMeans,
    zero_mean: Vec<f64>,
    eps: f64,
    use_dw: bool,
    use_dy: bool,
    use_dn: bool,
}

impl Ctx<'_> {
    fn sigma_terminal(&self, sp: &StatePath) -> f64 {
        let n = self.grid.steps;
        let (m, fz) = (self.model, self.frozen);
        sp.rho[n] * (m.phi_x(sp.x[n], fz.terminal_mean) + m.g_prime(sp.x[n]) * fz.phi_y_mean)
    }

    fn pi_terminal(&self, sp: &StatePath) -> f64 {
        let n = self.grid.steps;
        let (m, fz) = (self.model, self.frozen);
        sp.rho[n] * (m.phi(sp.x[n], fz.terminal_mean) + m.g(sp.x[n]) * fz.phi_y_mean)
    }

    fn sigma_density(&self, sp: &StatePath, j: usize) -> f64 {
        let (m, fz) = (self.model, self.frozen);
        let t = self.grid.time(j);
        let x = sp.x[j];
        sp.rho[j] * (m.l_x(t, x, fz.cost_mean[j], sp.control_at(j)) + m.f_prime(x) * fz.ly_mean[j])
    }

    fn pi_density(&self, sp: &StatePath, j: usize) -> f64 {
        let (m, fz) = (self.model, self.frozen);
        let t = self.grid.time(j);
        let x = sp.x[j];
        sp.rho[j] * (m.l(t, x, fz.cost_mean[j], sp.control_at(j)) + m.f(x) * fz.ly_mean[j])
    }

    fn trapezoid_from(&self, from: usize, mut term: impl FnMut(usize) -> f64) -> f64 {
        let n = self.grid.steps;
        if from >= n {
            return 0.0;
        }
        let mut s = 0.5 * (term(from) + term(n));
        for j in from + 1..n {
            s += term(j);
        }
        s * self.grid.dt()
    }

    fn sigma_at(&self, sp: &StatePath, from: usize) -> f64 {
        self.sigma_terminal(sp) + self.trapezoid_from(from, |j| self.sigma_density(sp, j))
    }

    fn pi_at(&self, sp: &StatePath, from: usize) -> f64 {
        self.pi_terminal(sp) + self.trapezoid_from(from, |j| self.pi_density(sp, j))
    }

    fn resim(
        &self,
        noise: &CellNoise,
        src: &StatePath,
        from: usize,
        dst: &mut StatePath,
    ) -> Result<()> {
        dst.x[from] = src.x[from];
        dst.rho[from] = src.rho[from];
        dst.y[from] = src.y[from];
        advance_path(
            self.model,
            self.policy,
            noise,
            &self.zero_mean,
            &self.grid,
            Measure::Reweighted,
            dst,
            from,
        )
        .map_err(|(step, msg)| Error::Simulation {
            path: usize::MAX,
            step,
            msg,
        })
    }

    /// Log of the per-cell factor of the fundamental solution.
    fn log_flow_cell(&self, sp: &StatePath, noise: &CellNoise, i: usize) -> Result<f64> {
        let m = self.model;
        let t = self.grid.time(i);
        let (x, v) = (sp.x[i], sp.controls[i]);
        let dt = self.grid.dt();
        let sx = m.sigma_x(t, x, 0.0, v);
        let mut l = (m.b_x(t, x, 0.0, v) - 0.5 * sx * sx) * dt + sx * noise.dw1[i];
        let counts = noise.counts_at(i);
        for (k, mark) in m.levy.marks.iter().enumerate() {
            let gx = m.gamma_x(t, x, 0.0, v, k);
            if counts[k] > 0 {
                if !(1.0 + gx > 0.0) {
                    return Err(Error::Degeneracy(format!(
                        "1 + gamma_x = {} at step {i}, mark {k}",
                        1.0 + gx
                    )));
                }
                l += counts[k] as f64 * (1.0 + gx).ln();
            }
            l -= mark.rate * dt * gx;
        }
        Ok(l)
    }

    fn log_flow(&self, sp: &StatePath, noise: &CellNoise, from: usize) -> Result<Vec<f64>> {
        let n = self.grid.steps;
        let mut out = vec![0.0; n + 1];
        for i in from..n {
            out[i + 1] = out[i] + self.log_flow_cell(sp, noise, i)?;
        }
        Ok(out)
    }

    /// `H_x(t_j)` for `j = from..=N` on the path simulated in `sp`.
    fn hx_profile(
        &self,
        noise: &mut CellNoise,
        sp: &StatePath,
        from: usize,
        scratch: &mut StatePath,
    ) -> Result<Vec<f64>> {
        let n = self.grid.steps;
        let m = self.model;
        let mut out = vec![0.0; n + 1];
        for j in from..=n {
            // the horizon borrows the last cell for its derivatives
            let cell = j.min(n - 1);
            let t = self.grid.time(j);
            let (x, v) = (sp.x[j], sp.control_at(j));
            let sigma = self.sigma_at(sp, j);
            let mut hx = sigma * m.b_x(t, x, 0.0, v);
            if self.use_dw {
                let sx = m.sigma_x(t, x, 0.0, v);
                if sx != 0.0 {
                    let d = cell_central_difference(noise, Driver::W1, cell, self.eps, |nz| {
                        self.resim(nz, sp, cell, scratch)?;
                        Ok(self.sigma_at(scratch, j))
                    })?;
                    hx += sx * d;
                }
            }
            if self.use_dy {
                let hxv = m.h_x(t, x);
                if hxv != 0.0 {
                    let d = cell_central_difference(noise, Driver::Y, cell, self.eps, |nz| {
                        self.resim(nz, sp, cell, scratch)?;
                        Ok(self.pi_at(scratch, j))
                    })?;
                    let lambda = m.h(t, x) * self.pi_at(sp, j);
                    hx += hxv * (d - lambda);
                }
            }
            if self.use_dn {
                for (k, mark) in m.levy.marks.iter().enumerate() {
                    let gx = m.gamma_x(t, x, 0.0, v, k);
                    if gx == 0.0 {
                        continue;
                    }
                    let d = cell_jump_difference(noise, cell, k, sigma, |nz| {
                        self.resim(nz, sp, cell, scratch)?;
                        Ok(self.sigma_at(scratch, j))
                    })?;
                    hx += mark.rate * gx * d;
                }
            }
            out[j] = hx;
        }
        Ok(out)
    }

    fn q_from(&self, sp: &StatePath, hx: &[f64], log_flow: &[f64], i: usize) -> f64 {
        let l0 = log_flow[i];
        self.sigma_at(sp, i) + self.trapezoid_from(i, |j| hx[j] * (log_flow[j] - l0).exp())
    }

    /// `q(t_i)` on a perturbed copy of the path: resimulate, rebuild `H_x`
    /// and the flow from `t_i` on.
    fn q_perturbed(
        &self,
        noise: &mut CellNoise,
        base: &StatePath,
        i: usize,
        sp: &mut StatePath,
        scratch: &mut StatePath,
    ) -> Result<f64> {
        self.resim(noise, base, i, sp)?;
        let hx = self.hx_profile(noise, sp, i, scratch)?;
        let lf = self.log_flow(sp, noise, i)?;
        Ok(self.q_from(sp, &hx, &lf, i))
    }

    fn path_adjoint(
        &self,
        path: &PathBundle,
        base: &StatePath,
        want_k: bool,
        want_r: bool,
    ) -> Result<Sec3Adjoint> {
        let n = self.grid.steps;
        let nm = self.model.n_marks();
        let mut noise = CellNoise::from_path(path);
        let mut scratch = StatePath::new(n, self.model.x0);
        let mut sp2 = StatePath::new(n, self.model.x0);

        let sigma: Vec<f64> = (0..=n).map(|j| self.sigma_at(base, j)).collect();
        let pi: Vec<f64> = (0..=n).map(|j| self.pi_at(base, j)).collect();
        let lambda: Vec<f64> = (0..=n)
            .map(|j| self.model.h(self.grid.time(j), base.x[j]) * pi[j])
            .collect();
        let hx = self.hx_profile(&mut noise, base, 0, &mut scratch)?;
        let log_flow = self.log_flow(base, &noise, 0)?;
        let q: Vec<f64> = (0..=n)
            .map(|i| self.q_from(base, &hx, &log_flow, i))
            .collect();

        let k = if want_k {
            let mut k = vec![0.0; n];
            for (i, ki) in k.iter_mut().enumerate() {
                *ki = cell_central_difference(&mut noise, Driver::W1, i, self.eps, |nz| {
                    let mut nz = nz.clone();
                    self.q_perturbed(&mut nz, base, i, &mut sp2, &mut scratch)
                })?;
            }
            Some(k)
        } else {
            None
        };
        let r = if want_r {
            let mut r = vec![0.0; n * nm];
            for i in 0..n {
                for mk in 0..nm {
                    r[i * nm + mk] = cell_jump_difference(&mut noise, i, mk, q[i], |nz| {
                        let mut nz = nz.clone();
                        self.q_perturbed(&mut nz, base, i, &mut sp2, &mut scratch)
                    })?;
                }
            }
            Some(r)
        } else {
            None
        };
        Ok(Sec3Adjoint {
            sigma,
            pi,
            lambda,
            hx,
            log_flow,
            q,
            k,
            r,
        })
    }
}

fn check_scope(model: &ModelSpec, ens: &StateEnsemble, paths: &[PathBundle]) -> Result<()> {
    if model.state_depends_on_mean() {
        return Err(Error::Usage(
            "the closed-form adjoint covers dynamics without mean field in the state".into(),
        ));
    }
    if ens.measure != Measure::Reweighted {
        return Err(Error::Usage(
            "adjoint needs a reference-measure ensemble".into(),
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

/// `G(t_i, t_j)` along one simulated path.
pub fn fundamental_solution(
    model: &ModelSpec,
    state: &StatePath,
    path: &PathBundle,
    t_index: usize,
    s_index: usize,
) -> Result<f64> {
    if s_index < t_index || s_index > path.grid.steps {
        return Err(Error::Domain(format!(
            "need t_index <= s_index <= N, got {t_index}, {s_index}"
        )));
    }
    let frozen = FrozenMeans {
        cost_mean: vec![],
        ly_mean: vec![],
        terminal_mean: 0.0,
        phi_y_mean: 0.0,
    };
    let ctx = Ctx {
        model,
        policy: &|_: usize, _: f64| 0.0,
        grid: path.grid,
        frozen: &frozen,
        zero_mean: vec![],
        eps: 0.0,
        use_dw: false,
        use_dy: false,
        use_dn: false,
    };
    let noise = CellNoise::from_path(path);
    let mut l = 0.0;
    for i in t_index..s_index {
        l += ctx.log_flow_cell(state, &noise, i)?;
    }
    Ok(l.exp())
}

/// Adjoint processes along every path of a reference-measure ensemble.
pub fn sec3_adjoint(
    model: &ModelSpec,
    policy: &dyn Policy,
    ens: &StateEnsemble,
    paths: &[PathBundle],
    opts: Sec3Options,
) -> Result<Vec<Sec3Adjoint>> {
    check_scope(model, ens, paths)?;
    let frozen = FrozenMeans::from_ensemble(model, ens);
    let grid = ens.grid;
    let eps = opts.eps.unwrap_or_else(|| default_eps(grid.dt()));
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("eps must be positive, got {eps}")));
    }
    let ctx = Ctx {
        model,
        policy,
        grid,
        frozen: &frozen,
        zero_mean: vec![0.0; grid.steps + 1],
        eps,
        use_dw: model.diffusion.x != 0.0,
        use_dy: model.observation.slope != 0.0,
        use_dn: !model.levy.is_empty() && model.jump.x != 0.0,
    };
    let (want_k, want_r) = match opts.derivatives {
        DerivativeMode::All => (true, !model.levy.is_empty()),
        DerivativeMode::None => (false, false),
        DerivativeMode::Needed => (
            model.diffusion.v != 0.0,
            !model.levy.is_empty() && model.jump.v != 0.0,
        ),
    };
    let res: Vec<Result<Sec3Adjoint>> = paths
        .par_iter()
        .zip(ens.paths.par_iter())
        .enumerate()
        .map(|(k, (p, s))| {
            ctx.path_adjoint(p, s, want_k, want_r).map_err(|e| match e {
                Error::Simulation { step, msg, .. } => Error::Simulation { path: k, step, msg },
                other => other,
            })
        })
        .collect();
    res.into_iter().collect()
}

/// Pathwise `H_v(t_i)` for `i < N`, time-major `[i][path]`.
pub fn hv_values(
    model: &ModelSpec,
    ens: &StateEnsemble,
    adjoints: &[Sec3Adjoint],
) -> Result<Vec<Vec<f64>>> {
    let n = ens.grid.steps;
    let nm = model.n_marks();
    let frozen = FrozenMeans::from_ensemble(model, ens);
    let need_k = model.diffusion.v != 0.0;
    let need_r = nm > 0 && model.jump.v != 0.0;
    for a in adjoints {
        if (need_k && a.k.is_none()) || (need_r && a.r.is_none()) {
            return Err(Error::Usage(
                "adjoint lacks derivatives required by H_v".into(),
            ));
        }
    }
    let mut out = vec![vec![0.0; ens.len()]; n];
    for (i, row) in out.iter_mut().enumerate() {
        let t = ens.grid.time(i);
        for (k, (s, a)) in ens.paths.iter().zip(adjoints).enumerate() {
            let (x, v) = (s.x[i], s.controls[i]);
            let mut hv = model.b_v(t, x, 0.0, v) * a.q[i]
                + s.rho[i] * model.l_v(t, x, frozen.cost_mean[i], v);
            if need_k {
                hv += model.sigma_v(t, x, 0.0, v) * a.k.as_ref().unwrap()[i];
            }
            if need_r {
                let r = a.r.as_ref().unwrap();
                for (m, mark) in model.levy.marks.iter().enumerate() {
                    hv += mark.rate * model.gamma_v(t, x, 0.0, v, m) * r[i * nm + m];
                }
            }
            row[k] = hv;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StationarityRow {
    pub t: f64,
    /// Root mean square of the fitted conditional expectation.
    pub l2: f64,
    pub mean: f64,
    pub min: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StationarityReport {
    pub rows: Vec<StationarityRow>,
    pub sup: f64,
}

/// Observation-conditional expectation of a time-major pathwise quantity.
pub fn conditional_profile(
    ens: &StateEnsemble,
    values: &[Vec<f64>],
    est: &ConditionalEstimator,
) -> Result<StationarityReport> {
    let mut rows = Vec::with_capacity(values.len());
    for (i, v) in values.iter().enumerate() {
        let fit = est.fit(&ens.y_at(i), v, i)?;
        rows.push(StationarityRow {
            t: ens.grid.time(i),
            l2: fit.l2,
            mean: fit.mean,
            min: fit.min,
            se: fit.se,
        });
    }
    let sup = rows.iter().map(|r| r.l2).fold(0.0, f64::max);
    Ok(StationarityReport { rows, sup })
}

/// `E[H_v | F^Y_t]` on the grid.
pub fn hv_stationarity(
    model: &ModelSpec,
    ens: &StateEnsemble,
    adjoints: &[Sec3Adjoint],
    est: &ConditionalEstimator,
) -> Result<StationarityReport> {
    conditional_profile(ens, &hv_values(model, ens, adjoints)?, est)
}
