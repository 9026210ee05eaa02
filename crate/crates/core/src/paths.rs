//! Driving noise on a uniform grid: Brownian increments for `W1` and the
//! reference-measure observation `Y`, plus a marked compound-Poisson record.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        let g = TimeGrid { horizon, steps };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("time grid needs at least one step".into()));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::Config(format!(
                "horizon must be positive and finite, got {}",
                self.horizon
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    #[inline]
    pub fn time(&self, i: usize) -> f64 {
        if i == self.steps {
            self.horizon
        } else {
            i as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| self.time(i)).collect()
    }

    /// Cell containing a jump at time `t`, using the half-open cells
    /// `(t_i, t_{i+1}]` so that the jump acts on the step leaving `t_i`.
    #[inline]
    pub fn jump_cell(&self, t: f64) -> usize {
        let c = (t / self.dt()).ceil() as usize;
        c.saturating_sub(1).min(self.steps - 1)
    }

    /// Index of the grid node at `t`, or a domain error when `t` is not a node.
    pub fn node(&self, t: f64) -> Result<usize> {
        let dt = self.dt();
        let i = (t / dt).round();
        if !(i >= 0.0 && (t - i * dt).abs() <= 1e-9 * dt && i as usize <= self.steps) {
            return Err(Error::Domain(format!("time {t} is not a grid node")));
        }
        Ok(i as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mark {
    pub z: f64,
    pub rate: f64,
}

/// Finite-activity Lévy measure with finitely many atoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct LevyMeasure {
    pub marks: Vec<Mark>,
}

impl LevyMeasure {
    pub fn new(marks: Vec<Mark>) -> Result<Self> {
        let l = LevyMeasure { marks };
        l.validate()?;
        Ok(l)
    }

    pub fn none() -> Self {
        LevyMeasure { marks: Vec::new() }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, m) in self.marks.iter().enumerate() {
            if !(m.z.is_finite() && m.z != 0.0) {
                return Err(Error::Config(format!(
                    "mark {i}: jump size must be nonzero"
                )));
            }
            if !(m.rate.is_finite() && m.rate > 0.0) {
                return Err(Error::Config(format!("mark {i}: rate must be positive")));
            }
        }
        Ok(())
    }

    pub fn total_rate(&self) -> f64 {
        self.marks.iter().map(|m| m.rate).sum()
    }

    pub fn len(&self) -> usize {
        self.marks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.marks.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jump {
    pub time: f64,
    pub mark: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Driver {
    W1,
    Y,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub dw1: Vec<f64>,
    pub dy: Vec<f64>,
    pub jumps: Vec<Jump>,
    pub seed: u64,
    pub index: u64,
    pub n_marks: usize,
    pub grid: TimeGrid,
}

impl PathBundle {
    /// Jump counts per cell and mark, laid out as `counts[cell * n_marks + mark]`.
    pub fn cell_counts(&self) -> Vec<u32> {
        let mut counts = vec![0u32; self.grid.steps * self.n_marks];
        for j in &self.jumps {
            counts[self.grid.jump_cell(j.time) * self.n_marks + j.mark] += 1;
        }
        counts
    }

    pub fn increments(&self, which: Driver) -> &[f64] {
        match which {
            Driver::W1 => &self.dw1,
            Driver::Y => &self.dy,
        }
    }

    /// Value of the driver at grid node `i`.
    pub fn level(&self, which: Driver, i: usize) -> f64 {
        self.increments(which)[..i].iter().sum()
    }

    pub fn terminal(&self, which: Driver) -> f64 {
        self.level(which, self.grid.steps)
    }

    /// Cumulative path at every node, length `N + 1`.
    pub fn cumulative(&self, which: Driver) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.grid.steps + 1);
        let mut s = 0.0;
        out.push(0.0);
        for d in self.increments(which) {
            s += d;
            out.push(s);
        }
        out
    }

    pub fn jump_count(&self, mark: usize) -> usize {
        self.jumps.iter().filter(|j| j.mark == mark).count()
    }

    /// Compensated count `N_m([0,T]) - rate_m T`.
    pub fn compensated_count(&self, mark: usize, levy: &LevyMeasure) -> f64 {
        self.jump_count(mark) as f64 - levy.marks[mark].rate * self.grid.horizon
    }
}

fn path_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Generate `n_paths` independent scenarios. Path `k` draws from its own
/// stream of the seeded generator, so the result does not depend on the
/// execution order.
pub fn generate_paths(
    grid: TimeGrid,
    levy: &LevyMeasure,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<PathBundle>> {
    grid.validate()?;
    levy.validate()?;
    if n_paths == 0 {
        return Err(Error::Config("n_paths must be at least 1".into()));
    }
    let poissons: Vec<Poisson<f64>> = levy
        .marks
        .iter()
        .map(|m| Poisson::new(m.rate * grid.horizon))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Config(format!("jump intensity: {e}")))?;
    let paths = (0..n_paths as u64)
        .into_par_iter()
        .map(|k| generate_one(grid, &poissons, seed, k))
        .collect();
    Ok(paths)
}

fn generate_one(grid: TimeGrid, poissons: &[Poisson<f64>], seed: u64, index: u64) -> PathBundle {
    let mut rng = path_rng(seed, index);
    let sd = grid.dt().sqrt();
    let n = grid.steps;
    let mut dw1 = Vec::with_capacity(n);
    let mut dy = Vec::with_capacity(n);
    for _ in 0..n {
        let z: f64 = StandardNormal.sample(&mut rng);
        dw1.push(sd * z);
    }
    for _ in 0..n {
        let z: f64 = StandardNormal.sample(&mut rng);
        dy.push(sd * z);
    }
    let mut jumps = Vec::new();
    for (mark, p) in poissons.iter().enumerate() {
        let count = p.sample(&mut rng) as usize;
        for _ in 0..count {
            let u: f64 = rng.random();
            jumps.push(Jump {
                time: grid.horizon * (1.0 - u),
                mark,
            });
        }
    }
    sort_jumps(&mut jumps);
    PathBundle {
        dw1,
        dy,
        jumps,
        seed,
        index,
        n_marks: poissons.len(),
        grid,
    }
}

fn sort_jumps(jumps: &mut [Jump]) {
    jumps.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.mark.cmp(&b.mark)));
}

/// Copy of `path` with one extra jump of the given mark at time `t`.
pub fn insert_jump(path: &PathBundle, t: f64, mark: usize) -> Result<PathBundle> {
    if !(t > 0.0 && t <= path.grid.horizon) {
        return Err(Error::Domain(format!(
            "jump time {t} outside (0, {}]",
            path.grid.horizon
        )));
    }
    if mark >= path.n_marks {
        return Err(Error::Domain(format!(
            "mark index {mark} out of range ({} marks)",
            path.n_marks
        )));
    }
    let mut out = path.clone();
    out.jumps.push(Jump { time: t, mark });
    sort_jumps(&mut out.jumps);
    Ok(out)
}

/// Copy of `path` with the increment of the cell starting at `s` raised by `eps`.
pub fn shift_brownian(path: &PathBundle, which: Driver, s: f64, eps: f64) -> Result<PathBundle> {
    let i = path.grid.node(s)?;
    if i >= path.grid.steps {
        return Err(Error::Domain(format!("time {s} starts no cell")));
    }
    Ok(shift_cell(path, which, i, eps))
}

pub fn shift_cell(path: &PathBundle, which: Driver, cell: usize, eps: f64) -> PathBundle {
    let mut out = path.clone();
    match which {
        Driver::W1 => out.dw1[cell] += eps,
        Driver::Y => out.dy[cell] += eps,
    }
    out
}

/// Flat per-cell view of a path, the form the simulators consume.
#[derive(Debug, Clone, PartialEq)]
pub struct CellNoise {
    pub dw1: Vec<f64>,
    pub dy: Vec<f64>,
    pub counts: Vec<u32>,
    pub n_marks: usize,
}

impl CellNoise {
    pub fn from_path(path: &PathBundle) -> Self {
        CellNoise {
            dw1: path.dw1.clone(),
            dy: path.dy.clone(),
            counts: path.cell_counts(),
            n_marks: path.n_marks,
        }
    }

    #[inline]
    pub fn counts_at(&self, cell: usize) -> &[u32] {
        &self.counts[cell * self.n_marks..(cell + 1) * self.n_marks]
    }

    #[inline]
    pub fn shift(&mut self, which: Driver, cell: usize, eps: f64) {
        match which {
            Driver::W1 => self.dw1[cell] += eps,
            Driver::Y => self.dy[cell] += eps,
        }
    }

    #[inline]
    pub fn add_jump(&mut self, cell: usize, mark: usize, delta: i32) {
        let c = &mut self.counts[cell * self.n_marks + mark];
        *c = (*c as i64 + delta as i64) as u32;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn levy() -> LevyMeasure {
        LevyMeasure::new(vec![
            Mark { z: -0.5, rate: 0.3 },
            Mark { z: 0.4, rate: 1.2 },
        ])
        .unwrap()
    }

    #[test]
    fn grid_definition() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        assert_eq!(g.dt(), 0.25);
        assert_eq!(g.times().len(), 5);
        assert!(TimeGrid::new(1.0, 0).is_err());
        assert_eq!(g.jump_cell(0.25), 0);
        assert_eq!(g.jump_cell(0.26), 1);
        assert_eq!(g.jump_cell(1.0), 3);
        assert_eq!(g.node(0.5).unwrap(), 2);
        assert!(g.node(0.3).is_err());
    }

    #[test]
    fn zero_intensity_gives_no_jumps() {
        let g = TimeGrid::new(1.0, 10).unwrap();
        let paths = generate_paths(g, &LevyMeasure::none(), 50, 3).unwrap();
        assert!(paths.iter().all(|p| p.jumps.is_empty()));
    }

    #[test]
    fn invalid_inputs_rejected() {
        let g = TimeGrid::new(1.0, 10).unwrap();
        assert!(generate_paths(g, &levy(), 0, 1).is_err());
        assert!(LevyMeasure::new(vec![Mark { z: 0.0, rate: 1.0 }]).is_err());
        assert!(LevyMeasure::new(vec![Mark { z: 1.0, rate: 0.0 }]).is_err());
        let bad = TimeGrid {
            horizon: 1.0,
            steps: 0,
        };
        assert!(generate_paths(bad, &levy(), 5, 1).is_err());
    }

    #[test]
    fn same_seed_same_paths_and_order_independence() {
        let g = TimeGrid::new(1.0, 20).unwrap();
        let a = generate_paths(g, &levy(), 30, 11).unwrap();
        let b = generate_paths(g, &levy(), 30, 11).unwrap();
        assert_eq!(a, b);
        let c = generate_paths(g, &levy(), 10, 11).unwrap();
        assert_eq!(&a[..10], &c[..]);
        let d = generate_paths(g, &levy(), 10, 12).unwrap();
        assert_ne!(a[0].dw1, d[0].dw1);
    }

    #[test]
    fn jumps_sorted_and_in_range() {
        let g = TimeGrid::new(2.0, 20).unwrap();
        for p in generate_paths(g, &levy(), 200, 5).unwrap() {
            for w in p.jumps.windows(2) {
                assert!(w[0].time <= w[1].time);
            }
            for j in &p.jumps {
                assert!(j.time > 0.0 && j.time <= 2.0 && j.mark < 2);
            }
        }
    }

    #[test]
    fn insert_and_shift_examples() {
        let g = TimeGrid::new(1.0, 10).unwrap();
        let p = generate_paths(
            g,
            &LevyMeasure::new(vec![Mark { z: 1.0, rate: 1e-9 }]).unwrap(),
            1,
            1,
        )
        .unwrap()
        .remove(0);
        let q = insert_jump(&p, 0.5, 0).unwrap();
        assert_eq!(q.jumps.len(), p.jumps.len() + 1);
        let r = insert_jump(&insert_jump(&q, 0.9, 0).unwrap(), 0.1, 0).unwrap();
        assert_eq!(r.jumps.len(), q.jumps.len() + 2);
        assert!(r.jumps.windows(2).all(|w| w[0].time <= w[1].time));
        assert!(insert_jump(&p, 0.0, 0).is_err());
        assert!(insert_jump(&p, 1.5, 0).is_err());
        assert!(insert_jump(&p, 0.5, 1).is_err());

        assert_eq!(shift_brownian(&p, Driver::W1, 0.3, 0.0).unwrap(), p);
        let s = shift_brownian(&p, Driver::W1, 0.3, 0.01).unwrap();
        assert!((s.terminal(Driver::W1) - p.terminal(Driver::W1) - 0.01).abs() < 1e-14);
        assert_eq!(s.dy, p.dy);
        assert!(shift_brownian(&p, Driver::W1, 0.35, 0.01).is_err());
        assert!(shift_brownian(&p, Driver::W1, 1.0, 0.01).is_err());
        let ab = shift_brownian(
            &shift_brownian(&p, Driver::W1, 0.1, 0.2).unwrap(),
            Driver::Y,
            0.5,
            0.3,
        )
        .unwrap();
        let ba = shift_brownian(
            &shift_brownian(&p, Driver::Y, 0.5, 0.3).unwrap(),
            Driver::W1,
            0.1,
            0.2,
        )
        .unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn cell_counts_follow_jump_cells() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let mut p = generate_paths(g, &levy(), 1, 0).unwrap().remove(0);
        p.jumps.clear();
        let p = insert_jump(&insert_jump(&p, 0.25, 1).unwrap(), 0.3, 0).unwrap();
        let c = p.cell_counts();
        assert_eq!(c, vec![0, 1, 1, 0, 0, 0, 0, 0]);
        let noise = CellNoise::from_path(&p);
        assert_eq!(noise.counts_at(1), &[1, 0]);
    }
}
