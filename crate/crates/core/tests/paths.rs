use mfsmp::paths::{
    generate_paths, insert_jump, shift_brownian, Driver, LevyMeasure, Mark, TimeGrid,
};
use mfsmp::stats::mean_se;

fn levy() -> LevyMeasure {
    LevyMeasure::new(vec![
        Mark { z: -0.5, rate: 0.3 },
        Mark { z: 0.4, rate: 2.0 },
    ])
    .unwrap()
}

#[test]
fn same_seed_same_paths() {
    let grid = TimeGrid::new(1.0, 16).unwrap();
    let a = generate_paths(grid, &levy(), 50, 9).unwrap();
    let b = generate_paths(grid, &levy(), 50, 9).unwrap();
    assert_eq!(a, b);
    let c = generate_paths(grid, &levy(), 50, 10).unwrap();
    assert_ne!(a, c);
}

#[test]
fn prefix_of_a_larger_run_is_unchanged() {
    let grid = TimeGrid::new(1.0, 16).unwrap();
    let small = generate_paths(grid, &levy(), 10, 4).unwrap();
    let large = generate_paths(grid, &levy(), 40, 4).unwrap();
    assert_eq!(&large[..10], &small[..]);
}

#[test]
fn brownian_increments_have_the_right_law() {
    let grid = TimeGrid::new(2.0, 8).unwrap();
    let paths = generate_paths(grid, &LevyMeasure::none(), 20000, 1).unwrap();
    for which in [Driver::W1, Driver::Y] {
        let t: Vec<f64> = paths.iter().map(|p| p.terminal(which)).collect();
        let sq: Vec<f64> = t.iter().map(|v| v * v).collect();
        let m = mean_se(&t);
        let v = mean_se(&sq);
        assert!(m.mean.abs() <= 3.0 * m.se);
        assert!((v.mean - 2.0).abs() <= 3.0 * v.se);
    }
}

#[test]
fn jump_counts_have_poisson_means() {
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let paths = generate_paths(grid, &levy(), 20000, 2).unwrap();
    for (m, mark) in levy().marks.iter().enumerate() {
        let c: Vec<f64> = paths
            .iter()
            .map(|p| p.compensated_count(m, &levy()))
            .collect();
        let ms = mean_se(&c);
        assert!(ms.mean.abs() <= 3.0 * ms.se, "mark {m} rate {}", mark.rate);
    }
}

#[test]
fn inserted_jump_lands_in_its_cell() {
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let p = &generate_paths(grid, &levy(), 1, 3).unwrap()[0];
    let q = insert_jump(p, 0.35, 1).unwrap();
    assert_eq!(q.jump_count(1), p.jump_count(1) + 1);
    let (a, b) = (p.cell_counts(), q.cell_counts());
    assert_eq!(b[3 * 2 + 1], a[3 * 2 + 1] + 1);
    assert!(insert_jump(p, 0.0, 0).is_err());
    assert!(insert_jump(p, 0.5, 2).is_err());
}

#[test]
fn brownian_shift_moves_one_increment() {
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let p = &generate_paths(grid, &levy(), 1, 5).unwrap()[0];
    let q = shift_brownian(p, Driver::Y, 0.4, 0.25).unwrap();
    assert_eq!(q.dw1, p.dw1);
    for i in 0..10 {
        let want = if i == 4 { p.dy[i] + 0.25 } else { p.dy[i] };
        assert_eq!(q.dy[i], want);
    }
    assert!(shift_brownian(p, Driver::W1, 1.0, 0.1).is_err());
}

#[test]
fn invalid_inputs_are_rejected() {
    assert!(TimeGrid::new(0.0, 10).is_err());
    assert!(TimeGrid::new(1.0, 0).is_err());
    assert!(LevyMeasure::new(vec![Mark { z: 1.0, rate: -1.0 }]).is_err());
    let grid = TimeGrid::new(1.0, 4).unwrap();
    assert!(generate_paths(grid, &levy(), 0, 1).is_err());
}
