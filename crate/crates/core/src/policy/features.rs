use serde::{Deserialize, Serialize};

use crate::simenv::State;

pub const FEATURE_DIM: usize = 10;

pub type FeatureVector = [f64; FEATURE_DIM];

/// Fixed normalization divisors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureScales {
    pub position: f64,
    pub speed: f64,
    pub accel: f64,
}

impl Default for FeatureScales {
    fn default() -> Self {
        Self { position: 50.0, speed: 15.0, accel: 10.0 }
    }
}

/// Layout: ego x, y, speed, sin(heading), cos(heading), accel, ado-visible
/// flag, ado x, y, speed. Ado entries are zero while it is out of sight.
pub fn featurize(state: &State, scales: &FeatureScales) -> FeatureVector {
    let ego = &state.ego;
    let (sin, cos) = ego.heading.sin_cos();
    let mut f = [
        ego.x / scales.position,
        ego.y / scales.position,
        ego.speed / scales.speed,
        sin,
        cos,
        ego.accel / scales.accel,
        0.0,
        0.0,
        0.0,
        0.0,
    ];
    if let (true, Some(obs)) = (state.ado_visible, state.ado_obs) {
        f[6] = 1.0;
        f[7] = obs.x / scales.position;
        f[8] = obs.y / scales.position;
        f[9] = obs.speed / scales.speed;
    }
    f
}
