//! Deterministic 2D four-way intersection simulator.
//!
//! A rollout drives the ego along its route under a [`Policy`] while an ado
//! vehicle rushes through the crossing on its own route, ignoring the ego.
//! Perception of the ado is limited by an occluder and corrupted by Gaussian
//! noise drawn from a per-step counter-based stream, so two policies rolled
//! out under the same condition and seed see identical noise.

mod expert;
mod geometry;

use std::collections::VecDeque;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SgdaError};
use crate::policy::Policy;
use crate::seed;
use crate::stl::SignalTable;

pub use expert::{Conflict, ExpertParams, ScriptedExpert};
pub use geometry::{Approach, Occluder, ParamRanges, Path, ScenarioGeometry};

pub const SIGNAL_DISTANCE: &str = "ego_ado_distance";
pub const SIGNAL_SPEED: &str = "ego_speed";
pub const SIGNAL_BRAKE: &str = "brake_intensity";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdoSide {
    Opposite,
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Maneuver {
    Straight,
    Left,
    Right,
}

impl AdoSide {
    pub const ALL: [AdoSide; 3] = [AdoSide::Opposite, AdoSide::Left, AdoSide::Right];
}

impl Maneuver {
    pub const ALL: [Maneuver; 3] = [Maneuver::Straight, Maneuver::Left, Maneuver::Right];
}

/// One scenario instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvCondition {
    pub ego_init_distance: f64,
    pub ado_side: AdoSide,
    pub ado_maneuver: Maneuver,
    pub ado_init_distance: f64,
    pub ado_min_speed: f64,
    pub ado_max_speed: f64,
}

impl EnvCondition {
    /// Draws from the uniform prior: every continuous field uniform within its
    /// range, categories uniform, and the two ado speeds sorted.
    pub fn sample_uniform<R: Rng + ?Sized>(ranges: &ParamRanges, rng: &mut R) -> Self {
        let mut uniform = |r: [f64; 2]| r[0] + (r[1] - r[0]) * rng.random::<f64>();
        let ego_init_distance = uniform(ranges.ego_init_distance);
        let ado_init_distance = uniform(ranges.ado_init_distance);
        let a = uniform(ranges.ado_speed);
        let b = uniform(ranges.ado_speed);
        Self {
            ego_init_distance,
            ado_side: AdoSide::ALL[rng.random_range(0..3)],
            ado_maneuver: Maneuver::ALL[rng.random_range(0..3)],
            ado_init_distance,
            ado_min_speed: a.min(b),
            ado_max_speed: a.max(b),
        }
    }

    /// Noise seed for rollouts under this condition: a hash of the condition
    /// mixed with a run-level base, so every policy sees the same stream.
    pub fn noise_seed(&self, base: u64) -> u64 {
        let cat = (self.ado_side as u64) << 8 | self.ado_maneuver as u64;
        [self.ego_init_distance, self.ado_init_distance, self.ado_min_speed, self.ado_max_speed]
            .iter()
            .fold(seed::mix64(base ^ cat), |h, v| seed::mix64(h ^ v.to_bits()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub accel: f64,
    /// Arc length travelled along the route.
    pub s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdoState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
}

/// Noisy perception of the ado.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdoObservation {
    pub x: f64,
    pub y: f64,
    pub speed: f64,
}

/// Least-squares estimate of the ado's current position and velocity from
/// the last `track_window` observations. Velocity is zero from a single one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdoTrack {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    /// Mean observed speed.
    pub speed: f64,
}

impl AdoTrack {
    /// Fits `obs`, the oldest first and spaced `dt` apart.
    pub fn fit(obs: &[AdoObservation], dt: f64) -> Option<Self> {
        let n = obs.len();
        if n == 0 {
            return None;
        }
        let nf = n as f64;
        let t_mean = (nf - 1.0) / 2.0 * dt;
        let mean = |f: &dyn Fn(&AdoObservation) -> f64| obs.iter().map(f).sum::<f64>() / nf;
        let (x_mean, y_mean, speed) = (mean(&|o| o.x), mean(&|o| o.y), mean(&|o| o.speed));
        let stt: f64 = (0..n).map(|k| (k as f64 * dt - t_mean).powi(2)).sum();
        let slope = |f: &dyn Fn(&AdoObservation) -> f64, m: f64| {
            if stt == 0.0 {
                0.0
            } else {
                obs.iter().enumerate().map(|(k, o)| (k as f64 * dt - t_mean) * (f(o) - m)).sum::<f64>() / stt
            }
        };
        let vx = slope(&|o| o.x, x_mean);
        let vy = slope(&|o| o.y, y_mean);
        let t_now = (nf - 1.0) * dt;
        Some(Self { x: x_mean + vx * (t_now - t_mean), y: y_mean + vy * (t_now - t_mean), vx, vy, speed })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub t: f64,
    pub ego: EgoState,
    pub ado: AdoState,
    pub ado_visible: bool,
    /// Consecutive steps the ado has been in view, this one included.
    pub ado_track_age: u32,
    pub ado_obs: Option<AdoObservation>,
    /// Line fit through the recent observations while the ado stays in view.
    pub ado_track: Option<AdoTrack>,
}

/// Longitudinal command: negative brakes, positive throttles, as a fraction
/// of the maximum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub longitudinal: f64,
}

impl Action {
    pub fn new(longitudinal: f64) -> Self {
        let v = if longitudinal.is_nan() { 0.0 } else { longitudinal.clamp(-1.0, 1.0) };
        Self { longitudinal: v }
    }

    pub fn brake_intensity(&self) -> f64 {
        (-self.longitudinal).max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GoalReached,
    Collision,
    Timeout,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: State,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub env: EnvCondition,
    pub seed: u64,
    pub steps: Vec<Step>,
    pub termination: Termination,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Speed command of the rushing ado: accelerate toward the maximum, never
/// dropping below the minimum.
pub fn ado_controller(speed: f64, e: &EnvCondition, geom: &ScenarioGeometry) -> f64 {
    (speed + geom.ado_accel * geom.dt).min(e.ado_max_speed).max(e.ado_min_speed)
}

fn observation_noise(seed: u64, step: usize, geom: &ScenarioGeometry) -> [f64; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    let pos_sd = geom.position_noise_var.sqrt();
    let speed_sd = geom.speed_noise_var.sqrt();
    let nx: f64 = rng.sample(StandardNormal);
    let ny: f64 = rng.sample(StandardNormal);
    let ns: f64 = rng.sample(StandardNormal);
    [nx * pos_sd, ny * pos_sd, ns * speed_sd]
}

const PARKED: [f64; 2] = [1.0e6, 1.0e6];

/// Rolls out `policy` under `e`. Deterministic in `(policy, e, geom, seed)`.
pub fn rollout(policy: &dyn Policy, e: &EnvCondition, geom: &ScenarioGeometry, seed: u64) -> Result<Trajectory> {
    geom.validate()?;
    geom.ranges.check(e)?;
    let ego_path = geom.ego_path();
    let ado_path = geom.path(Approach::for_ado(e.ado_side), e.ado_maneuver);
    let goal = geom.ego_goal(&ego_path);
    let radius_sum = geom.radius_sum();

    let mut ego_s = geom.spawn_arc(e.ego_init_distance);
    let mut ego_v = geom.ego_init_speed;
    let mut ego_a = 0.0;
    let mut ado_s = geom.spawn_arc(e.ado_init_distance);
    let mut ado_v = e.ado_min_speed;
    let mut track_age = 0u32;
    let mut window: VecDeque<AdoObservation> = VecDeque::with_capacity(geom.track_window);
    let mut steps = Vec::new();

    for k in 0..geom.max_steps {
        let (ego_pos, ego_heading) = ego_path.pose(ego_s);
        let (ado_pos, ado_heading) = if geom.ado_enabled { ado_path.pose(ado_s) } else { (PARKED, 0.0) };
        let visible = geom.ado_enabled && geom.line_of_sight(ego_pos, ado_pos);
        track_age = if visible { track_age + 1 } else { 0 };
        let ado_obs = visible.then(|| {
            let n = observation_noise(seed, k, geom);
            AdoObservation { x: ado_pos[0] + n[0], y: ado_pos[1] + n[1], speed: ado_v + n[2] }
        });
        match ado_obs {
            Some(obs) => {
                if window.len() == geom.track_window {
                    window.pop_front();
                }
                window.push_back(obs);
            }
            None => window.clear(),
        }
        let ado_track = AdoTrack::fit(window.make_contiguous(), geom.dt);
        let state = State {
            t: k as f64 * geom.dt,
            ego: EgoState { x: ego_pos[0], y: ego_pos[1], heading: ego_heading, speed: ego_v, accel: ego_a, s: ego_s },
            ado: AdoState { x: ado_pos[0], y: ado_pos[1], heading: ado_heading, speed: if geom.ado_enabled { ado_v } else { 0.0 } },
            ado_visible: visible,
            ado_track_age: track_age,
            ado_obs,
            ado_track,
        };
        let action = Action::new(policy.act(&state).longitudinal);
        steps.push(Step { state, action });

        let gap = (ego_pos[0] - ado_pos[0]).hypot(ego_pos[1] - ado_pos[1]) - radius_sum;
        let termination = if gap <= 0.0 {
            Some(Termination::Collision)
        } else if ego_s >= goal {
            Some(Termination::GoalReached)
        } else if k + 1 == geom.max_steps {
            Some(Termination::Timeout)
        } else {
            None
        };
        if let Some(termination) = termination {
            return Ok(Trajectory { env: *e, seed, steps, termination });
        }

        let accel = if action.longitudinal >= 0.0 {
            action.longitudinal * geom.max_accel
        } else {
            action.longitudinal * geom.max_decel
        };
        let next_v = (ego_v + accel * geom.dt).max(0.0);
        ego_s += ego_v * geom.dt;
        ego_a = (next_v - ego_v) / geom.dt;
        ego_v = next_v;

        ado_s += ado_v * geom.dt;
        ado_v = ado_controller(ado_v, e, geom);
    }
    unreachable!("max_steps >= 1 guarantees termination inside the loop")
}

/// Signals the properties are written over.
///
/// `ego_ado_distance` is the gap between the collision discs, so it is
/// non-positive exactly when the vehicles overlap.
pub fn extract_signals(traj: &Trajectory, geom: &ScenarioGeometry) -> Result<SignalTable> {
    geom.validate()?;
    if traj.steps.is_empty() {
        return Err(SgdaError::input("cannot extract signals from an empty trajectory"));
    }
    let radius_sum = geom.radius_sum();
    let n = traj.steps.len();
    let mut distance = Vec::with_capacity(n);
    let mut speed = Vec::with_capacity(n);
    let mut brake = Vec::with_capacity(n);
    for step in &traj.steps {
        let s = &step.state;
        distance.push((s.ego.x - s.ado.x).hypot(s.ego.y - s.ado.y) - radius_sum);
        speed.push(s.ego.speed);
        brake.push(step.action.brake_intensity());
    }
    let times = (0..n).map(|k| k as f64 * geom.dt).collect();
    SignalTable::new(times)?
        .with(SIGNAL_DISTANCE, distance)?
        .with(SIGNAL_SPEED, speed)?
        .with(SIGNAL_BRAKE, brake)
}
