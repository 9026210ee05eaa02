//! Deterministic reductions. Every sum over paths goes through `pairwise_sum`
//! so results do not depend on how work was split across threads.

use serde::Serialize;

const LEAF: usize = 32;

pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= LEAF {
        let mut s = 0.0;
        for &x in xs {
            s += x;
        }
        return s;
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(xs) / xs.len() as f64
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
}

pub fn mean_se(xs: &[f64]) -> MeanSe {
    let n = xs.len();
    let m = mean(xs);
    if n < 2 {
        return MeanSe {
            mean: m,
            se: f64::NAN,
        };
    }
    let dev: Vec<f64> = xs.iter().map(|x| (x - m) * (x - m)).collect();
    let var = pairwise_sum(&dev) / (n - 1) as f64;
    MeanSe {
        mean: m,
        se: (var / n as f64).sqrt(),
    }
}

/// Self-normalised weighted mean `sum(w x) / sum(w)`.
pub fn weighted_mean(w: &[f64], x: &[f64]) -> f64 {
    debug_assert_eq!(w.len(), x.len());
    let wx: Vec<f64> = w.iter().zip(x).map(|(a, b)| a * b).collect();
    pairwise_sum(&wx) / pairwise_sum(w)
}

/// Least-squares slope of `ys` against `xs`.
pub fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let mx = mean(xs);
    let my = mean(ys);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    sxy / sxx
}

/// Slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    slope(&lx, &ly)
}

/// Trapezoid weight of grid node `i` on a grid with `n_steps` cells.
#[inline]
pub fn trapezoid_weight(i: usize, n_steps: usize, dt: f64) -> f64 {
    if i == 0 || i == n_steps {
        0.5 * dt
    } else {
        dt
    }
}
