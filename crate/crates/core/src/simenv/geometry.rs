//! Intersection layout: a four-way crossing centred at the origin with one
//! lane per direction and right-hand traffic. The ego always approaches from
//! the south, driving north.

use serde::{Deserialize, Serialize};

use super::{AdoSide, EnvCondition, Maneuver};
use crate::error::{Result, SgdaError};

/// The road a vehicle arrives on, named by compass side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Approach {
    South,
    North,
    West,
    East,
}

impl Approach {
    /// Unit direction of travel while approaching the centre.
    fn forward(self) -> [f64; 2] {
        match self {
            Approach::South => [0.0, 1.0],
            Approach::North => [0.0, -1.0],
            Approach::West => [1.0, 0.0],
            Approach::East => [-1.0, 0.0],
        }
    }

    /// Where the ado spawns relative to an ego arriving from the south.
    pub fn for_ado(side: AdoSide) -> Self {
        match side {
            AdoSide::Opposite => Approach::North,
            AdoSide::Left => Approach::West,
            AdoSide::Right => Approach::East,
        }
    }
}

/// Axis-aligned rectangle blocking line of sight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Occluder {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Occluder {
    /// Slab test: does the closed segment `a -> b` touch the rectangle?
    pub fn blocks(&self, a: [f64; 2], b: [f64; 2]) -> bool {
        let mut t0 = 0.0_f64;
        let mut t1 = 1.0_f64;
        for axis in 0..2 {
            let d = b[axis] - a[axis];
            if d.abs() < 1e-12 {
                if a[axis] < self.min[axis] || a[axis] > self.max[axis] {
                    return false;
                }
            } else {
                let mut lo = (self.min[axis] - a[axis]) / d;
                let mut hi = (self.max[axis] - a[axis]) / d;
                if lo > hi {
                    std::mem::swap(&mut lo, &mut hi);
                }
                t0 = t0.max(lo);
                t1 = t1.min(hi);
                if t0 > t1 {
                    return false;
                }
            }
        }
        true
    }
}

/// Ranges of the continuous environment parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRanges {
    pub ego_init_distance: [f64; 2],
    pub ado_init_distance: [f64; 2],
    pub ado_speed: [f64; 2],
}

impl Default for ParamRanges {
    fn default() -> Self {
        Self { ego_init_distance: [15.0, 45.0], ado_init_distance: [10.0, 50.0], ado_speed: [3.0, 15.0] }
    }
}

impl ParamRanges {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("ego_init_distance", self.ego_init_distance),
            ("ado_init_distance", self.ado_init_distance),
            ("ado_speed", self.ado_speed),
        ] {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
                return Err(SgdaError::config(format!("range {name} = {r:?} is not an ordered finite interval")));
            }
        }
        if self.ado_speed[0] < 0.0 {
            return Err(SgdaError::config("ado speeds must be non-negative"));
        }
        Ok(())
    }

    /// Checks `e` against these ranges, with a small tolerance for values that
    /// went through the [0, 1] encoding.
    pub fn check(&self, e: &EnvCondition) -> Result<()> {
        const TOL: f64 = 1e-9;
        let within = |v: f64, r: [f64; 2]| v.is_finite() && v >= r[0] - TOL && v <= r[1] + TOL;
        if !within(e.ego_init_distance, self.ego_init_distance) {
            return Err(SgdaError::input(format!("ego_init_distance {} out of range", e.ego_init_distance)));
        }
        if !within(e.ado_init_distance, self.ado_init_distance) {
            return Err(SgdaError::input(format!("ado_init_distance {} out of range", e.ado_init_distance)));
        }
        if !within(e.ado_min_speed, self.ado_speed) || !within(e.ado_max_speed, self.ado_speed) {
            return Err(SgdaError::input("ado speed out of range"));
        }
        if e.ado_min_speed > e.ado_max_speed {
            return Err(SgdaError::input("ado_min_speed exceeds ado_max_speed"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioGeometry {
    /// Integration step, seconds.
    pub dt: f64,
    pub max_steps: usize,
    pub lane_width: f64,
    pub ego_radius: f64,
    pub ado_radius: f64,
    /// Length of each approach road measured from the centre.
    pub road_length: f64,
    pub ego_maneuver: Maneuver,
    pub ego_init_speed: f64,
    /// The ego's goal lies this far past the centre along its exit road.
    pub goal_past_center: f64,
    pub max_accel: f64,
    pub max_decel: f64,
    pub ado_accel: f64,
    pub occluder: Option<Occluder>,
    /// Observation noise variance per position coordinate, m^2.
    pub position_noise_var: f64,
    /// Observation noise variance of the ado speed, (m/s)^2.
    pub speed_noise_var: f64,
    /// Number of recent observations the ado track is fitted to.
    pub track_window: usize,
    /// Test hook: when false the ado is parked far away and never seen.
    pub ado_enabled: bool,
    pub ranges: ParamRanges,
}

impl Default for ScenarioGeometry {
    fn default() -> Self {
        Self {
            dt: 0.1,
            max_steps: 300,
            lane_width: 3.5,
            ego_radius: 1.0,
            ado_radius: 1.0,
            road_length: 120.0,
            ego_maneuver: Maneuver::Straight,
            ego_init_speed: 8.0,
            goal_past_center: 20.0,
            max_accel: 3.0,
            max_decel: 8.0,
            ado_accel: 2.5,
            occluder: Some(Occluder { min: [-60.0, -60.0], max: [-6.0, -6.0] }),
            position_noise_var: 2.0,
            speed_noise_var: 1.0,
            track_window: 10,
            ado_enabled: true,
            ranges: ParamRanges::default(),
        }
    }
}

impl ScenarioGeometry {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dt", self.dt),
            ("lane_width", self.lane_width),
            ("max_accel", self.max_accel),
            ("max_decel", self.max_decel),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(SgdaError::config(format!("geometry.{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("ego_radius", self.ego_radius),
            ("ado_radius", self.ado_radius),
            ("ego_init_speed", self.ego_init_speed),
            ("ado_accel", self.ado_accel),
            ("position_noise_var", self.position_noise_var),
            ("speed_noise_var", self.speed_noise_var),
            ("goal_past_center", self.goal_past_center),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(SgdaError::config(format!("geometry.{name} must be non-negative, got {v}")));
            }
        }
        if self.track_window == 0 {
            return Err(SgdaError::config("geometry.track_window must be at least 1"));
        }
        if self.max_steps == 0 {
            return Err(SgdaError::config("geometry.max_steps must be at least 1"));
        }
        self.ranges.validate()?;
        let turn_extent = 1.5 * self.lane_width + self.lane_width;
        let longest_spawn = self.ranges.ego_init_distance[1].max(self.ranges.ado_init_distance[1]);
        if self.road_length <= longest_spawn || self.road_length <= self.goal_past_center || self.road_length <= turn_extent {
            return Err(SgdaError::config("geometry.road_length must exceed spawn distances, goal offset and turn extent"));
        }
        if self.ranges.ego_init_distance[0] <= turn_extent || self.ranges.ado_init_distance[0] <= turn_extent {
            return Err(SgdaError::config("spawn distances must lie outside the turning area"));
        }
        if let Some(o) = self.occluder {
            if !(o.min[0] < o.max[0] && o.min[1] < o.max[1]) {
                return Err(SgdaError::config("occluder min must be below max on both axes"));
            }
        }
        Ok(())
    }

    /// Arc-length parameterized route for a vehicle entering from `approach`.
    pub fn path(&self, approach: Approach, maneuver: Maneuver) -> Path {
        let h = self.lane_width / 2.0;
        let d = self.road_length;
        // Local frame: x to the right of travel, y along travel.
        let mut local = vec![[h, -d]];
        match maneuver {
            Maneuver::Straight => local.push([h, d]),
            Maneuver::Right => {
                let r = self.lane_width;
                let c = [h + r, -h - r];
                push_arc(&mut local, c, r, std::f64::consts::PI, std::f64::consts::FRAC_PI_2);
                local.push([d, -h]);
            }
            Maneuver::Left => {
                let r = 1.5 * self.lane_width + h;
                let c = [h - r, h - r];
                push_arc(&mut local, c, r, 0.0, std::f64::consts::FRAC_PI_2);
                local.push([-d, h]);
            }
        }
        let u = approach.forward();
        let right = [u[1], -u[0]];
        let points = local
            .into_iter()
            .map(|[lx, ly]| [lx * right[0] + ly * u[0], lx * right[1] + ly * u[1]])
            .collect();
        Path::new(points)
    }

    pub fn ego_path(&self) -> Path {
        self.path(Approach::South, self.ego_maneuver)
    }

    /// Arc length along the ego path at which the episode succeeds.
    pub fn ego_goal(&self, path: &Path) -> f64 {
        path.length() - (self.road_length - self.goal_past_center)
    }

    /// Arc length at which a vehicle spawned `distance` metres before the
    /// centre starts.
    pub fn spawn_arc(&self, distance: f64) -> f64 {
        self.road_length - distance
    }

    pub fn radius_sum(&self) -> f64 {
        self.ego_radius + self.ado_radius
    }

    /// Is the sightline between the two positions clear?
    pub fn line_of_sight(&self, a: [f64; 2], b: [f64; 2]) -> bool {
        self.occluder.is_none_or(|o| !o.blocks(a, b))
    }
}

fn push_arc(out: &mut Vec<[f64; 2]>, c: [f64; 2], r: f64, from: f64, to: f64) {
    const SEGMENTS: usize = 24;
    for i in 0..=SEGMENTS {
        let a = from + (to - from) * i as f64 / SEGMENTS as f64;
        out.push([c[0] + r * a.cos(), c[1] + r * a.sin()]);
    }
}

/// Polyline with cumulative arc length.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    points: Vec<[f64; 2]>,
    cumulative: Vec<f64>,
}

impl Path {
    pub fn new(points: Vec<[f64; 2]>) -> Self {
        assert!(points.len() >= 2, "a path needs two points");
        let mut cumulative = Vec::with_capacity(points.len());
        let mut acc = 0.0;
        cumulative.push(0.0);
        for w in points.windows(2) {
            acc += (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
            cumulative.push(acc);
        }
        Self { points, cumulative }
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    /// Position and heading at arc length `s`; extrapolates linearly beyond
    /// either end.
    pub fn pose(&self, s: f64) -> ([f64; 2], f64) {
        let n = self.points.len();
        let seg = match self.cumulative.binary_search_by(|c| c.total_cmp(&s)) {
            Ok(i) => i.min(n - 2),
            Err(i) => i.saturating_sub(1).min(n - 2),
        };
        let (a, b) = (self.points[seg], self.points[seg + 1]);
        let len = self.cumulative[seg + 1] - self.cumulative[seg];
        let dir = [(b[0] - a[0]) / len, (b[1] - a[1]) / len];
        let off = s - self.cumulative[seg];
        ([a[0] + dir[0] * off, a[1] + dir[1] * off], dir[1].atan2(dir[0]))
    }
}
