#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use safelearn::confidence::ConfidenceConfig;
use safelearn::filter::FilterOptions;
use safelearn::sim::excitation::Excitation;
use safelearn::sim::{ClosedLoopConfig, FilterMode, NominalPolicy};
use safelearn::types::{Constraint, InputSet, LtiModel, NoiseSpec, SafetySpec};

pub fn model() -> LtiModel {
    LtiModel::new(
        DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 0.8]),
        DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
    )
    .unwrap()
}

pub fn box_safety(bound: f64) -> SafetySpec {
    let h_mat = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
    let constraint = Constraint::new(h_mat, DVector::from_element(4, bound)).unwrap();
    SafetySpec::constant(constraint, InputSet::symmetric_box(1, 2.0).unwrap(), 2).unwrap()
}

/// Two-state plant, `W = 0.01 I`, `r = 0.01`, `s = 2`, `λ = 1`, `|x_i| ≤ 5`,
/// `|u| ≤ 2`, uniform dither of amplitude 1.
pub fn scenario(delta: f64, policy: NominalPolicy, filter: FilterMode, horizon: usize) -> ClosedLoopConfig {
    ClosedLoopConfig {
        model: model(),
        noise: NoiseSpec::new(DMatrix::identity(2, 2) * 0.01, 0.01).unwrap(),
        x0: DVector::zeros(2),
        confidence: ConfidenceConfig::new(0.01, 2.0, 1.0, delta, 2, 1).unwrap(),
        safety: box_safety(5.0),
        policy,
        excitation: Excitation::UniformDither { amplitude: 1.0 },
        filter,
        options: FilterOptions::default(),
        horizon,
        poe_window: 20,
        seed: 1,
    }
}

pub const SAMPLE_CONFIG: &str = r#"
[system]
a = [[0.9, 0.1], [0.0, 0.8]]
b = [[0.0], [1.0]]
w = [[0.01, 0.0], [0.0, 0.01]]
x0 = [0.0, 0.0]

[assumptions]
r = 0.01
s = 2.0
lambda = 1.0

[safety]
input_set = { kind = "box", lower = [-2.0], upper = [2.0] }

[[safety.schedule]]
h_mat = [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]
h = [5.0, 5.0, 5.0, 5.0]

[filter]
delta = 0.2

[policy]
kind = "constant"
u = [2.0]

[excitation]
kind = "uniform_dither"
amplitude = 1.0

[run]
horizon = 100
runs = 1
seed = 7

[decay]
horizon = 2000

[verify]
coverage_runs = 100
coverage_horizon = 100
coverage_delta = 0.1
safety_runs = 100
equivalence_instances = 10
equivalence_samples = 2000
"#;
