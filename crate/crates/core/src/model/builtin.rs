use serde::{Deserialize, Serialize};

use super::{
    Coefficient, ControlSet, ModelSpec, ObservationDrift, RunningCost, Shape, TerminalCost,
};
use crate::error::{Error, Result};
use crate::paths::LevyMeasure;

pub const BUILTIN_NAMES: &[&str] = &["lq_section4", "lq_section3", "bounded_nonlinear"];

/// Mean-field linear-quadratic model.
///
/// Dynamics `dx = (A x + B E0[x] + C v) dt + (D x + E E0[x] + F v) dW1`
/// with jump part `z (S x + K E0[x] + I v) dN~`, cost
/// `1/2 E0[ int L (x - E0x)^2 + O (v - M)^2 dt + N (x(T) - E0x(T))^2 ]`.
/// Defaults are the benchmark problem used throughout the test suite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LqSpec {
    pub state_drift: f64,
    pub mean_drift: f64,
    pub control_drift: f64,
    pub state_vol: f64,
    pub mean_vol: f64,
    pub control_vol: f64,
    pub state_jump: f64,
    pub mean_jump: f64,
    pub control_jump: f64,
    pub deviation_weight: f64,
    pub control_weight: f64,
    pub benchmark: f64,
    pub terminal_weight: f64,
    pub x0: f64,
    pub observation: ObservationDrift,
    pub controls: ControlSet,
}

impl Default for LqSpec {
    fn default() -> Self {
        LqSpec {
            state_drift: 0.1,
            mean_drift: 0.0,
            control_drift: 1.0,
            state_vol: 0.2,
            mean_vol: 0.0,
            control_vol: 0.1,
            state_jump: 0.1,
            mean_jump: 0.0,
            control_jump: 0.05,
            deviation_weight: 1.0,
            control_weight: 1.0,
            benchmark: 0.0,
            terminal_weight: 1.0,
            x0: 1.0,
            observation: ObservationDrift::default(),
            controls: ControlSet::unbounded(),
        }
    }
}

impl LqSpec {
    pub fn zero(x0: f64) -> Self {
        LqSpec {
            state_drift: 0.0,
            mean_drift: 0.0,
            control_drift: 0.0,
            state_vol: 0.0,
            mean_vol: 0.0,
            control_vol: 0.0,
            state_jump: 0.0,
            mean_jump: 0.0,
            control_jump: 0.0,
            deviation_weight: 0.0,
            control_weight: 1.0,
            benchmark: 0.0,
            terminal_weight: 0.0,
            x0,
            observation: ObservationDrift::default(),
            controls: ControlSet::unbounded(),
        }
    }

    pub fn model(&self, levy: &LevyMeasure) -> Result<ModelSpec> {
        if !(self.control_weight > 0.0) {
            return Err(Error::Config(
                "control weight must be bounded away from zero".into(),
            ));
        }
        if self.deviation_weight < 0.0 || self.terminal_weight < 0.0 {
            return Err(Error::Config("state weights must be nonnegative".into()));
        }
        let m = ModelSpec {
            drift: Coefficient::linear(self.state_drift, self.mean_drift, self.control_drift, 0.0),
            diffusion: Coefficient::linear(self.state_vol, self.mean_vol, self.control_vol, 0.0),
            jump: Coefficient::linear(self.state_jump, self.mean_jump, self.control_jump, 0.0),
            observation: self.observation,
            running: RunningCost {
                deviation_weight: self.deviation_weight,
                control_weight: self.control_weight,
                benchmark: self.benchmark,
                ..Default::default()
            },
            terminal: TerminalCost {
                deviation_weight: self.terminal_weight,
                ..Default::default()
            },
            cost_mean: Shape::Linear,
            terminal_mean: Shape::Linear,
            x0: self.x0,
            controls: self.controls,
            mean_field_in_state: true,
            levy: levy.clone(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn control_free(&self) -> bool {
        self.control_drift == 0.0 && self.control_vol == 0.0 && self.control_jump == 0.0
    }
}

/// Linear-quadratic model without mean field in the state, observed through
/// `dY = (alpha(x)/beta - beta/2) dt + dW2` with `alpha = a0 + a1 tanh(x)`.
///
/// Dynamics `dx = (A x + B v) dt + (C x + D v) dW1 + z (F x + G v) dN~`, cost
/// `1/2 E0[ int L (x - E0x)^2 + (v - M)^2 dt + N (x(T) - E0x(T))^2 ]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Sec3LqSpec {
    pub state_drift: f64,
    pub control_drift: f64,
    pub state_vol: f64,
    pub control_vol: f64,
    pub state_jump: f64,
    pub control_jump: f64,
    pub deviation_weight: f64,
    pub benchmark: f64,
    pub terminal_weight: f64,
    pub signal_level: f64,
    pub signal_slope: f64,
    pub price_vol: f64,
    pub x0: f64,
    pub controls: ControlSet,
}

impl Default for Sec3LqSpec {
    fn default() -> Self {
        Sec3LqSpec {
            state_drift: 0.1,
            control_drift: 1.0,
            state_vol: 0.2,
            control_vol: 0.1,
            state_jump: 0.1,
            control_jump: 0.05,
            deviation_weight: 1.0,
            benchmark: 0.0,
            terminal_weight: 1.0,
            signal_level: 0.5,
            signal_slope: 0.5,
            price_vol: 1.0,
            x0: 1.0,
            controls: ControlSet::unbounded(),
        }
    }
}

impl Sec3LqSpec {
    pub fn model(&self, levy: &LevyMeasure) -> Result<ModelSpec> {
        if !(self.price_vol > 0.0) {
            return Err(Error::Config("price volatility must be positive".into()));
        }
        let beta = self.price_vol;
        let m = ModelSpec {
            drift: Coefficient::linear(self.state_drift, 0.0, self.control_drift, 0.0),
            diffusion: Coefficient::linear(self.state_vol, 0.0, self.control_vol, 0.0),
            jump: Coefficient::linear(self.state_jump, 0.0, self.control_jump, 0.0),
            observation: ObservationDrift {
                shape: Shape::Tanh,
                slope: self.signal_slope / beta,
                level: self.signal_level / beta - 0.5 * beta,
            },
            running: RunningCost {
                deviation_weight: self.deviation_weight,
                control_weight: 1.0,
                benchmark: self.benchmark,
                ..Default::default()
            },
            terminal: TerminalCost {
                deviation_weight: self.terminal_weight,
                ..Default::default()
            },
            cost_mean: Shape::Linear,
            terminal_mean: Shape::Linear,
            x0: self.x0,
            controls: self.controls,
            mean_field_in_state: false,
            levy: levy.clone(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn control_free(&self) -> bool {
        self.control_drift == 0.0 && self.control_vol == 0.0 && self.control_jump == 0.0
    }
}

/// Smooth model with bounded drift nonlinearity and bounded observation
/// drift, optionally with mean field in the state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NonlinearParams {
    pub reversion: f64,
    pub mean_coupling: f64,
    pub control_gain: f64,
    pub vol_level: f64,
    pub vol_slope: f64,
    pub vol_mean: f64,
    pub vol_control: f64,
    pub jump_level: f64,
    pub jump_slope: f64,
    pub jump_mean: f64,
    pub jump_control: f64,
    pub signal_slope: f64,
    pub signal_level: f64,
    pub deviation_weight: f64,
    pub control_weight: f64,
    pub benchmark: f64,
    pub terminal_weight: f64,
    pub terminal_linear: f64,
    pub x0: f64,
    pub mean_field: bool,
    pub controls: ControlSet,
}

impl Default for NonlinearParams {
    fn default() -> Self {
        NonlinearParams {
            reversion: 0.5,
            mean_coupling: 0.3,
            control_gain: 1.0,
            vol_level: 0.3,
            vol_slope: 0.1,
            vol_mean: 0.1,
            vol_control: 0.1,
            jump_level: 0.2,
            jump_slope: 0.1,
            jump_mean: 0.1,
            jump_control: 0.05,
            signal_slope: 1.0,
            signal_level: 0.2,
            deviation_weight: 1.0,
            control_weight: 1.0,
            benchmark: 0.2,
            terminal_weight: 1.0,
            terminal_linear: 0.3,
            x0: 0.5,
            mean_field: false,
            controls: ControlSet::unbounded(),
        }
    }
}

impl NonlinearParams {
    pub fn model(&self, levy: &LevyMeasure) -> Result<ModelSpec> {
        let mf = |c: f64| if self.mean_field { c } else { 0.0 };
        let m = ModelSpec {
            drift: Coefficient {
                shape: Shape::Tanh,
                x: -self.reversion,
                y: mf(self.mean_coupling),
                v: self.control_gain,
                c: 0.0,
            },
            diffusion: Coefficient {
                shape: Shape::Tanh,
                x: self.vol_slope,
                y: mf(self.vol_mean),
                v: self.vol_control,
                c: self.vol_level,
            },
            jump: Coefficient {
                shape: Shape::Tanh,
                x: self.jump_slope,
                y: mf(self.jump_mean),
                v: self.jump_control,
                c: self.jump_level,
            },
            observation: ObservationDrift {
                shape: Shape::Tanh,
                slope: self.signal_slope,
                level: self.signal_level,
            },
            running: RunningCost {
                deviation_weight: self.deviation_weight,
                control_weight: self.control_weight,
                benchmark: self.benchmark,
                ..Default::default()
            },
            terminal: TerminalCost {
                deviation_weight: self.terminal_weight,
                linear: self.terminal_linear,
                ..Default::default()
            },
            cost_mean: Shape::Tanh,
            terminal_mean: Shape::Tanh,
            x0: self.x0,
            controls: self.controls,
            mean_field_in_state: self.mean_field,
            levy: levy.clone(),
        };
        m.validate()?;
        Ok(m)
    }
}

/// Build one of the shipped models from its JSON parameter object.
pub fn builtin_model(
    name: &str,
    params: &serde_json::Value,
    levy: &LevyMeasure,
) -> Result<ModelSpec> {
    fn parse<T: serde::de::DeserializeOwned>(name: &str, v: &serde_json::Value) -> Result<T> {
        let v = if v.is_null() {
            serde_json::Value::Object(Default::default())
        } else {
            v.clone()
        };
        serde_json::from_value(v).map_err(|e| Error::Config(format!("{name} parameters: {e}")))
    }
    match name {
        "lq_section4" => parse::<LqSpec>(name, params)?.model(levy),
        "lq_section3" => parse::<Sec3LqSpec>(name, params)?.model(levy),
        "bounded_nonlinear" => parse::<NonlinearParams>(name, params)?.model(levy),
        other => Err(Error::Config(format!(
            "unknown model '{other}', expected one of {BUILTIN_NAMES:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Point, Symbol};
    use crate::paths::Mark;
    use rand::{Rng, SeedableRng};

    fn levy() -> LevyMeasure {
        LevyMeasure::new(vec![
            Mark { z: -0.5, rate: 0.3 },
            Mark { z: 0.3, rate: 0.8 },
        ])
        .unwrap()
    }

    fn random_points(n: usize) -> Vec<Point> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        (0..n)
            .map(|_| Point {
                t: rng.random_range(0.0..1.0),
                x: rng.random_range(-2.0..2.0),
                y: rng.random_range(-2.0..2.0),
                v: rng.random_range(-2.0..2.0),
                mark: rng.random_range(0..2),
            })
            .collect()
    }

    #[test]
    fn partial_audit_for_every_builtin() {
        let pts = random_points(100);
        let nl_mf = NonlinearParams {
            mean_field: true,
            ..Default::default()
        };
        let models = vec![
            builtin_model(
                "lq_section4",
                &serde_json::json!({"mean_drift": 0.3, "mean_vol": 0.1, "mean_jump": 0.2}),
                &levy(),
            )
            .unwrap(),
            builtin_model("lq_section3", &serde_json::Value::Null, &levy()).unwrap(),
            builtin_model("bounded_nonlinear", &serde_json::json!({}), &levy()).unwrap(),
            nl_mf.model(&levy()).unwrap(),
        ];
        for m in &models {
            let audit = m.partial_audit(&pts);
            assert_eq!(audit.len(), Symbol::PARTIALS.len());
            for (s, err) in audit {
                assert!(err <= 1e-6, "{s:?}: {err}");
            }
        }
    }

    #[test]
    fn zero_lq_has_only_control_cost() {
        let m = LqSpec::zero(1.0).model(&LevyMeasure::none()).unwrap();
        assert!(m.drift.is_zero() && m.diffusion.is_zero() && m.jump.is_zero());
        assert_eq!(m.h(0.0, 3.0), 0.0);
        assert_eq!(m.l(0.0, 5.0, 2.0, 3.0), 0.5 * 9.0);
    }

    #[test]
    fn lq_cost_matches_display() {
        let spec = LqSpec {
            deviation_weight: 1.0,
            control_weight: 1.0,
            terminal_weight: 1.0,
            benchmark: 0.0,
            ..LqSpec::zero(1.0)
        };
        let m = spec.model(&LevyMeasure::none()).unwrap();
        let (x, y, v) = (1.3, 0.4, -0.7);
        assert!((m.l(0.0, x, y, v) - (0.5 * (x - y).powi(2) + 0.5 * v * v)).abs() < 1e-15);
        assert!((m.phi(x, y) - 0.5 * (x - y).powi(2)).abs() < 1e-15);
    }

    #[test]
    fn bad_configs_rejected() {
        assert!(builtin_model("nope", &serde_json::json!({}), &levy()).is_err());
        assert!(builtin_model(
            "lq_section4",
            &serde_json::json!({"control_weight": 0.0}),
            &levy()
        )
        .is_err());
        assert!(builtin_model("lq_section4", &serde_json::json!({"typo": 1.0}), &levy()).is_err());
    }

    #[test]
    fn sec3_observation_drift() {
        let m = Sec3LqSpec {
            signal_level: 0.4,
            signal_slope: 0.6,
            price_vol: 2.0,
            ..Default::default()
        }
        .model(&levy())
        .unwrap();
        let x: f64 = 0.37;
        let expected = (0.4 + 0.6 * x.tanh()) / 2.0 - 1.0;
        assert!((m.h(0.0, x) - expected).abs() < 1e-15);
    }
}
