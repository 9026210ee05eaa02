use mfsmp::model::{builtin_model, Point, BUILTIN_NAMES};
use mfsmp::paths::{LevyMeasure, Mark};
use serde_json::json;

fn levy() -> LevyMeasure {
    LevyMeasure::new(vec![Mark { z: -0.5, rate: 0.3 }]).unwrap()
}

fn points() -> Vec<Point> {
    let mut out = Vec::new();
    for &x in &[-1.3, 0.2, 0.9] {
        for &v in &[-0.4, 0.6] {
            out.push(Point {
                t: 0.3,
                x,
                y: 0.4 * x + 0.1,
                v,
                mark: 0,
            });
        }
    }
    out
}

#[test]
fn analytic_partials_match_finite_differences() {
    for name in BUILTIN_NAMES {
        let model = builtin_model(name, &json!({}), &levy()).unwrap();
        for (sym, gap) in model.partial_audit(&points()) {
            assert!(gap < 1e-6, "{name}: {sym:?} off by {gap}");
        }
    }
    let mf = builtin_model("bounded_nonlinear", &json!({ "mean_field": true }), &levy()).unwrap();
    for (sym, gap) in mf.partial_audit(&points()) {
        assert!(gap < 1e-6, "{sym:?} off by {gap}");
    }
}

#[test]
fn unknown_models_and_keys_are_config_errors() {
    let e = builtin_model("heston", &json!({}), &levy()).unwrap_err();
    assert_eq!(e.exit_code(), 2);
    let e = builtin_model("lq_section4", &json!({ "volatility": 1.0 }), &levy()).unwrap_err();
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn lq_cost_has_the_tracking_form() {
    let model = builtin_model(
        "lq_section4",
        &json!({ "deviation_weight": 1.0, "control_weight": 1.0, "terminal_weight": 1.0, "benchmark": 0.0 }),
        &levy(),
    )
    .unwrap();
    let (x, y, v) = (1.4, 0.5, -0.3);
    assert!((model.l(0.0, x, y, v) - (0.5 * (x - y) * (x - y) + 0.5 * v * v)).abs() < 1e-14);
    assert!((model.phi(x, y) - 0.5 * (x - y) * (x - y)).abs() < 1e-14);
}

#[test]
fn zero_lq_has_no_dynamics() {
    let params = json!({
        "state_drift": 0.0, "control_drift": 0.0, "state_vol": 0.0, "control_vol": 0.0,
        "state_jump": 0.0, "control_jump": 0.0, "deviation_weight": 0.0, "terminal_weight": 0.0
    });
    let model = builtin_model("lq_section4", &params, &levy()).unwrap();
    for p in points() {
        assert_eq!(model.b(p.t, p.x, p.y, p.v), 0.0);
        assert_eq!(model.sigma(p.t, p.x, p.y, p.v), 0.0);
        assert_eq!(model.gamma(p.t, p.x, p.y, p.v, 0), 0.0);
        assert_eq!(model.h(p.t, p.x), 0.0);
    }
}

#[test]
fn nonlinear_signal_is_bounded() {
    let model = builtin_model("bounded_nonlinear", &json!({}), &levy()).unwrap();
    let big = [-1e6, -10.0, 0.0, 10.0, 1e6].map(|x| model.h(0.0, x).abs());
    let sup = big.iter().cloned().fold(0.0, f64::max);
    assert!(sup.is_finite() && sup < 10.0);
}
