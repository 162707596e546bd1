//! Dynamic time warping.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SgdaError};
use crate::simenv::{Step, Trajectory};

/// Per-step feature used when comparing trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DtwFeature {
    X,
    Y,
    Speed,
    Heading,
    Accel,
}

impl DtwFeature {
    pub const DEFAULT: [DtwFeature; 3] = [DtwFeature::X, DtwFeature::Y, DtwFeature::Speed];

    fn of(self, step: &Step) -> f64 {
        let ego = &step.state.ego;
        match self {
            DtwFeature::X => ego.x,
            DtwFeature::Y => ego.y,
            DtwFeature::Speed => ego.speed,
            DtwFeature::Heading => ego.heading,
            DtwFeature::Accel => ego.accel,
        }
    }
}

/// Row-major per-step feature matrix of a trajectory.
pub fn feature_rows(traj: &Trajectory, features: &[DtwFeature]) -> Vec<Vec<f64>> {
    traj.steps.iter().map(|s| features.iter().map(|f| f.of(s)).collect()).collect()
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Classic DTW between two sequences of equal-width feature rows: both
/// endpoints matched, unit steps, no window, Euclidean local cost.
pub fn dtw<R: AsRef<[f64]>>(a: &[R], b: &[R]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(SgdaError::input("DTW needs non-empty sequences"));
    }
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for ra in a {
        cur[0] = f64::INFINITY;
        for (j, rb) in b.iter().enumerate() {
            let cost = euclidean(ra.as_ref(), rb.as_ref());
            cur[j + 1] = cost + prev[j].min(prev[j + 1]).min(cur[j]);
        }
        std::mem::swap(&mut prev, &mut cur);
        prev[0] = f64::INFINITY;
    }
    Ok(prev[m])
}

/// DTW distance between two trajectories over the chosen ego features.
pub fn dtw_distance(a: &Trajectory, b: &Trajectory, features: &[DtwFeature]) -> Result<f64> {
    dtw(&feature_rows(a, features), &feature_rows(b, features))
}
