//! Scripted, fallible expert driver.
//!
//! The expert cruises toward a target speed. Once the ado has been tracked
//! for longer than its reaction latency, it guesses the lane the ado occupies
//! from the track and extrapolates it in a straight line along that lane. A conflict is predicted at the first instant the ego would be
//! within `conflict_distance` of that line while the ado is less than
//! `time_margin` seconds of travel away along it. The ego is extrapolated at
//! no less than `proceed_speed`, so a stopped ego keeps yielding until the
//! ado has cleared.
//!
//! A conflict sooner than `ttc_threshold` triggers braking in proportion to
//! the deceleration needed to stop short of it. A conflict predicted for
//! right now means the ego is already committed, and it drives on.
//!
//! Occlusion, noise, the latency, the lag of the track and the straight-line
//! guess (turning ados are mispredicted) make the expert collide, halt and
//! brake hard in different parts of the environment space.

use serde::{Deserialize, Serialize};

use super::{Action, AdoTrack, Path, ScenarioGeometry, State};
use crate::error::{Result, SgdaError};
use crate::policy::Policy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpertParams {
    pub target_speed: f64,
    /// Throttle per m/s of speed deficit.
    pub cruise_gain: f64,
    /// Strongest braking the cruise loop applies when over speed.
    pub cruise_max_brake: f64,
    /// Conflicts predicted later than this are ignored, s.
    pub ttc_threshold: f64,
    /// Look-ahead along the ego route, s.
    pub horizon: f64,
    /// Half-width of the band around the ado's guessed line.
    pub conflict_distance: f64,
    /// Along-line slack, expressed in seconds of ado travel.
    pub time_margin: f64,
    /// The slack used instead while already decelerating: once yielding,
    /// the expert keeps yielding unless the gap is clearly large enough.
    pub yield_margin: f64,
    /// The slack used instead while slower than `creep_speed`.
    pub standstill_margin: f64,
    /// How far past the ego's point the ado must be before the way counts as clear.
    pub clear_distance: f64,
    /// The clearance required instead while decelerating or stopped.
    pub yield_clear_distance: f64,
    /// Throttle cap while still decelerating from a yield.
    pub resume_throttle: f64,
    pub reaction_latency: u32,
    /// Tracked speed below which the direction of travel is guessed from position.
    pub min_track_speed: f64,
    pub proceed_speed: f64,
    /// Distance kept between the stopping point and the zone.
    pub stop_buffer: f64,
    pub brake_gain: f64,
    /// Brake held while (nearly) stopped with a conflict still predicted.
    pub hold_brake: f64,
    pub creep_speed: f64,
}

impl Default for ExpertParams {
    fn default() -> Self {
        Self {
            target_speed: 10.0,
            cruise_gain: 1.0,
            cruise_max_brake: 0.2,
            ttc_threshold: 4.0,
            horizon: 10.0,
            conflict_distance: 1.25,
            time_margin: 8.0,
            yield_margin: 8.0,
            standstill_margin: 10.0,
            clear_distance: 0.5,
            yield_clear_distance: 8.0,
            resume_throttle: 0.6,
            reaction_latency: 5,
            min_track_speed: 1.0,
            proceed_speed: 2.0,
            stop_buffer: 0.0,
            brake_gain: 1.0,
            hold_brake: 0.38,
            creep_speed: 1.5,
        }
    }
}

impl ExpertParams {
    pub fn validate(&self) -> Result<()> {
        let values = [
            ("target_speed", self.target_speed),
            ("cruise_gain", self.cruise_gain),
            ("cruise_max_brake", self.cruise_max_brake),
            ("ttc_threshold", self.ttc_threshold),
            ("horizon", self.horizon),
            ("conflict_distance", self.conflict_distance),
            ("time_margin", self.time_margin),
            ("yield_margin", self.yield_margin),
            ("standstill_margin", self.standstill_margin),
            ("yield_clear_distance", self.yield_clear_distance),
            ("resume_throttle", self.resume_throttle),
            ("min_track_speed", self.min_track_speed),
            ("proceed_speed", self.proceed_speed),
            ("brake_gain", self.brake_gain),
            ("hold_brake", self.hold_brake),
            ("creep_speed", self.creep_speed),
        ];
        for (name, v) in values {
            if !(v.is_finite() && v >= 0.0) {
                return Err(SgdaError::config(format!("expert.{name} must be finite and non-negative, got {v}")));
            }
        }
        if !self.clear_distance.is_finite() || !self.stop_buffer.is_finite() {
            return Err(SgdaError::config("expert.clear_distance and expert.stop_buffer must be finite"));
        }
        if self.cruise_max_brake > 1.0 || self.hold_brake > 1.0 || self.resume_throttle > 1.0 {
            return Err(SgdaError::config("expert brake and throttle caps must not exceed 1"));
        }
        Ok(())
    }
}

/// A predicted conflict: when, and how far along its route the ego has got by then.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conflict {
    pub time: f64,
    pub distance: f64,
}

#[derive(Debug, Clone)]
pub struct ScriptedExpert {
    params: ExpertParams,
    route: Path,
    max_decel: f64,
    half_lane: f64,
}

const PREDICTION_STEP: f64 = 0.1;

impl ScriptedExpert {
    pub fn new(params: ExpertParams, geom: &ScenarioGeometry) -> Self {
        Self {
            params,
            route: geom.ego_path(),
            max_decel: geom.max_decel,
            half_lane: geom.lane_width / 2.0,
        }
    }

    pub fn params(&self) -> &ExpertParams {
        &self.params
    }

    fn cruise(&self, state: &State) -> f64 {
        let p = &self.params;
        let cap = if state.ego.accel < 0.0 { p.resume_throttle } else { 1.0 };
        (p.cruise_gain * (p.target_speed - state.ego.speed)).clamp(-p.cruise_max_brake, cap)
    }

    /// Lane the ado appears to drive in: a point on its centre line and the
    /// direction of travel. Outside the junction box the road is the one the
    /// tracked position lies on and the tracked velocity only picks the
    /// direction along it. Inside the box the velocity is snapped to the
    /// nearest axis. A track too slow to tell falls back on keep-right lanes.
    fn guessed_lane(&self, track: &AdoTrack) -> ([f64; 2], [f64; 2]) {
        let h = self.half_lane;
        let (x, y) = (track.x, track.y);
        let moving = track.vx.hypot(track.vy) >= self.params.min_track_speed;
        let east_west = if x.abs().max(y.abs()) > 2.0 * h || !moving {
            x.abs() >= y.abs()
        } else {
            track.vx.abs() >= track.vy.abs()
        };
        let dir = match (east_west, moving) {
            (true, true) => [track.vx.signum(), 0.0],
            (false, true) => [0.0, track.vy.signum()],
            // the southern lane heads east, the eastern lane north
            (true, false) => [if y < 0.0 { 1.0 } else { -1.0 }, 0.0],
            (false, false) => [0.0, if x > 0.0 { 1.0 } else { -1.0 }],
        };
        // keep-right lanes: the centre line sits half a lane to the right of travel
        let start = if dir[0] != 0.0 { [x, -dir[0] * h] } else { [dir[1] * h, y] };
        (start, dir)
    }

    /// First predicted instant at which the ego is inside the band around the
    /// ado's guessed line while the ado is about to pass, or passing, that point.
    pub fn predict_conflict(&self, state: &State) -> Option<Conflict> {
        let track = state.ado_track?;
        let p = &self.params;
        let (start, dir) = self.guessed_lane(&track);
        let ego_speed = state.ego.speed.max(p.proceed_speed);
        let ado_speed = track.speed.max(0.0);
        let yielding = state.ego.speed < p.creep_speed || state.ego.accel < 0.0;
        let margin = if state.ego.speed < p.creep_speed {
            p.standstill_margin
        } else if yielding {
            p.yield_margin
        } else {
            p.time_margin
        };
        let clear = if yielding { p.yield_clear_distance } else { p.clear_distance };
        let reach = p.conflict_distance + ado_speed * margin;
        let steps = (p.horizon / PREDICTION_STEP).round() as usize;
        (0..=steps).find_map(|j| {
            let tau = j as f64 * PREDICTION_STEP;
            let distance = ego_speed * tau;
            let (q, _) = self.route.pose(state.ego.s + distance);
            let rel = [q[0] - start[0], q[1] - start[1]];
            let lateral = (rel[0] * dir[1] - rel[1] * dir[0]).abs();
            let gap = rel[0] * dir[0] + rel[1] * dir[1] - ado_speed * tau;
            // gap > 0: the ado has yet to reach the ego's point on its line
            (lateral < p.conflict_distance && gap > -clear && gap < reach).then_some(Conflict { time: tau, distance })
        })
    }

    fn command(&self, state: &State) -> f64 {
        let p = &self.params;
        let v = state.ego.speed;
        if !state.ado_visible || state.ado_track_age <= p.reaction_latency {
            return self.cruise(state);
        }
        let Some(conflict) = self.predict_conflict(state) else {
            return self.cruise(state);
        };
        if conflict.time > p.ttc_threshold {
            return self.cruise(state);
        }
        if v < p.creep_speed {
            return -p.hold_brake;
        }
        if conflict.distance <= 0.0 {
            return self.cruise(state);
        }
        let room = conflict.distance - p.stop_buffer;
        if room <= 0.1 {
            return -1.0;
        }
        let needed = v * v / (2.0 * room);
        -(p.brake_gain * needed / self.max_decel).clamp(p.hold_brake, 1.0)
    }
}

impl Policy for ScriptedExpert {
    fn act(&self, state: &State) -> Action {
        Action::new(self.command(state))
    }
}
