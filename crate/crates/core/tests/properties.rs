use proptest::prelude::*;

use mfsmp::adjoint_mall::fundamental_solution;
use mfsmp::forward::simulate_state;
use mfsmp::lq::search::knot_schedule;
use mfsmp::model::{ControlPolicy, ControlSet, Sec3LqSpec};
use mfsmp::paths::{generate_paths, LevyMeasure, Mark, TimeGrid};
use mfsmp::regression::{observation_columns, Projector};
use mfsmp::stats::{mean, pairwise_sum, weighted_mean};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pairwise_sum_agrees_with_naive_sum(xs in prop::collection::vec(-1e3f64..1e3, 0..300)) {
        let naive: f64 = xs.iter().sum();
        prop_assert!((pairwise_sum(&xs) - naive).abs() <= 1e-9 * (1.0 + xs.iter().map(|v| v.abs()).sum::<f64>()));
    }

    #[test]
    fn weighted_mean_is_a_convex_combination(
        pairs in prop::collection::vec((0.01f64..5.0, -10.0f64..10.0), 1..100)
    ) {
        let (w, x): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let m = weighted_mean(&w, &x);
        let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(m >= lo - 1e-9 && m <= hi + 1e-9);
    }

    #[test]
    fn clipping_lands_in_the_set_and_is_idempotent(a in -5.0f64..5.0, width in 0.0f64..3.0, v in -20.0f64..20.0) {
        let set = ControlSet::interval(a, a + width);
        let c = set.clip(v);
        prop_assert!(set.contains(c));
        prop_assert_eq!(set.clip(c), c);
    }

    #[test]
    fn regression_preserves_the_sample_mean(
        rows in prop::collection::vec((-3.0f64..3.0, -5.0f64..5.0), 20..200)
    ) {
        let (y, target): (Vec<f64>, Vec<f64>) = rows.into_iter().unzip();
        if let Ok(proj) = Projector::new(&observation_columns(&y), 1e-8, 0) {
            let fit = proj.fit(&target).unwrap();
            prop_assert!((mean(&fit.values) - mean(&target)).abs() < 1e-9);
        }
    }

    #[test]
    fn knot_schedules_stay_inside_the_knot_range(knots in prop::collection::vec(-2.0f64..2.0, 1..8), steps in 1usize..60) {
        let s = knot_schedule(&knots, steps, 1.0);
        let lo = knots.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = knots.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(s.len(), steps);
        prop_assert_eq!(s[0], knots[0]);
        prop_assert!(s.iter().all(|v| *v >= lo - 1e-12 && *v <= hi + 1e-12));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fundamental_solution_composes(seed in 0u64..1000, a in 0usize..=20, b in 0usize..=20, c in 0usize..=20) {
        let mut idx = [a, b, c];
        idx.sort();
        let [t, u, v] = idx;
        let levy = LevyMeasure::new(vec![Mark { z: 0.5, rate: 2.0 }]).unwrap();
        let model = Sec3LqSpec::default().model(&levy).unwrap();
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let paths = generate_paths(grid, &levy, 1, seed).unwrap();
        let ens = simulate_state(&model, &ControlPolicy::constant(20, 0.2, ControlSet::unbounded()), &paths).unwrap();
        let s = &ens.paths[0];
        let g = |i, j| fundamental_solution(&model, s, &paths[0], i, j).unwrap();
        prop_assert!((g(t, u) * g(u, v) - g(t, v)).abs() <= 1e-12 * g(t, v).abs());
        prop_assert!(g(t, v) > 0.0);
    }

    #[test]
    fn paths_depend_only_on_seed_and_index(seed in 0u64..1000, n in 1usize..20, k in 0usize..20) {
        let grid = TimeGrid::new(1.0, 6).unwrap();
        let levy = LevyMeasure::new(vec![Mark { z: -0.5, rate: 0.3 }]).unwrap();
        let big = generate_paths(grid, &levy, 20, seed).unwrap();
        let small = generate_paths(grid, &levy, n, seed).unwrap();
        if k < n {
            prop_assert_eq!(&big[k], &small[k]);
        }
    }
}
