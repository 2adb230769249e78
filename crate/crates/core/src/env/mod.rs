//! Desk-scale kinematic driving simulator.
//!
//! The ego vehicle follows a bicycle model over a polyline route. Observations
//! combine an ego-centric occupancy grid with a fixed-length state vector, and
//! the reward is the sum of speed tracking, lateral, heading, smoothness and
//! terminal terms.

mod render;
mod route;
mod sim;

pub use render::GridShape;
pub use route::{Command, RouteGenerator, RouteProjection, RouteSpec, RuleZone, RuleZoneKind};
pub use sim::KineticEnv;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Length of [`Observation::state_vec`].
pub const STATE_DIM: usize = 10;

/// Layout of the state vector. Every entry is normalized to roughly unit scale.
pub mod state_index {
    /// speed / v_max
    pub const SPEED: usize = 0;
    pub const LAST_LONGITUDINAL: usize = 1;
    pub const LAST_STEER: usize = 2;
    /// Signed offset from the centerline divided by the active lateral threshold
    /// (positive = left of the route).
    pub const LATERAL: usize = 3;
    /// (ego heading - route heading) / pi
    pub const HEADING_ERROR: usize = 4;
    /// Bearing of the lookahead point in the ego frame / pi (positive = left).
    pub const LOOKAHEAD_BEARING: usize = 5;
    /// desired speed / v_max
    pub const DESIRED_SPEED: usize = 6;
    /// 1 - gap / detection_range for the nearest hazard ahead, 0 when clear.
    pub const HAZARD_PROXIMITY: usize = 7;
    /// 1 when an active red light or stop sign lies ahead within detection range.
    pub const RULE_ACTIVE: usize = 8;
    /// Distance to the next stop line / detection range, clamped to 1.
    pub const RULE_DISTANCE: usize = 9;
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid route: {0}")]
    InvalidRoute(String),
    #[error("step called on a finished episode; call reset first")]
    EpisodeDone,
    #[error("step called before reset")]
    NotReset,
    #[error("distance must be non-negative, got {0}")]
    NegativeDistance(f64),
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error("route file: {0}")]
    RouteFile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub position: Point,
    pub heading: f64,
    pub speed: f64,
    pub last_longitudinal: f64,
    pub last_steer: f64,
}

/// Two-dimensional agent action. Positive longitudinal is throttle, negative is
/// brake. Positive steer turns right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Action2D {
    pub longitudinal: f64,
    pub steer: f64,
}

impl Action2D {
    /// Builds an action with both components clamped to [-1, 1].
    pub fn new(longitudinal: f64, steer: f64) -> Self {
        Self {
            longitudinal: clamp_unit(longitudinal),
            steer: clamp_unit(steer),
        }
    }

    pub fn clamped(self) -> Self {
        Self::new(self.longitudinal, self.steer)
    }

    pub fn to_array(self) -> [f64; 2] {
        [self.longitudinal, self.steer]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1])
    }
}

fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(-1.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObstacleKind {
    Vehicle,
    Pedestrian,
}

/// Background actor. Moves with constant world-frame velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub position: Point,
    pub velocity: Point,
    pub radius: f64,
    pub kind: ObstacleKind,
}

/// Occupancy grid stored channel-major (C x H x W) as bytes; value = byte / 255.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Grid {
    pub fn empty() -> Self {
        Self { channels: 0, height: 0, width: 0, data: Vec::new() }
    }

    pub fn zeros(shape: GridShape) -> Self {
        Self {
            channels: shape.channels,
            height: shape.size,
            width: shape.size,
            data: vec![0; shape.channels * shape.size * shape.size],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x] as f64 / 255.0
    }

    pub fn channel_mean(&self, c: usize) -> f64 {
        let plane = self.height * self.width;
        if plane == 0 {
            return 0.0;
        }
        let s: u64 = self.data[c * plane..(c + 1) * plane].iter().map(|&b| b as u64).sum();
        s as f64 / (255.0 * plane as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub grid: Grid,
    pub state_vec: [f64; STATE_DIM],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationEvent {
    None,
    Blocked,
    RouteDeviation,
    RedLight,
    StopSign,
    Collision,
    RouteCompleted,
    Timeout,
}

impl TerminationEvent {
    pub fn is_failure(self) -> bool {
        matches!(
            self,
            Self::Blocked | Self::RouteDeviation | Self::RedLight | Self::StopSign | Self::Collision
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Blocked => "blocked",
            Self::RouteDeviation => "route_deviation",
            Self::RedLight => "red_light",
            Self::StopSign => "stop_sign",
            Self::Collision => "collision",
            Self::RouteCompleted => "route_completed",
            Self::Timeout => "timeout",
        }
    }
}

/// Infraction counts. Used per step and accumulated per episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Infractions {
    pub collision_vehicle: u32,
    pub collision_pedestrian: u32,
    pub red_light: u32,
    pub stop_sign: u32,
}

impl Infractions {
    pub fn add(&mut self, other: &Infractions) {
        self.collision_vehicle += other.collision_vehicle;
        self.collision_pedestrian += other.collision_pedestrian;
        self.red_light += other.red_light;
        self.stop_sign += other.stop_sign;
    }

    pub fn total(&self) -> u32 {
        self.collision_vehicle + self.collision_pedestrian + self.red_light + self.stop_sign
    }
}

/// Reward terms of a single step. `total()` is the step reward.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardTerms {
    pub speed: f64,
    pub lateral: f64,
    pub heading: f64,
    pub smooth: f64,
    pub terminal: f64,
}

impl RewardTerms {
    pub fn total(&self) -> f64 {
        self.speed + self.lateral + self.heading + self.smooth + self.terminal
    }
}

/// Speed bin of the discretized context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeedBin {
    Stopped,
    Slow,
    Moderate,
    High,
}

impl SpeedBin {
    pub const ALL: [SpeedBin; 4] = [Self::Stopped, Self::Slow, Self::Moderate, Self::High];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub route_completion: f64,
    pub env_reward: f64,
    pub reward_terms: RewardTerms,
    pub desired_speed: f64,
    pub command: Command,
    pub speed_bin: SpeedBin,
    pub infractions: Infractions,
    pub speed: f64,
    pub distance_travelled: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EnvMode {
    #[default]
    Train,
    Eval,
}

/// Reward coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub lateral_coef: f64,
    pub heading_coef: f64,
    pub smooth_coef: f64,
    pub failure_penalty: f64,
    pub success_reward: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            lateral_coef: 0.2,
            heading_coef: 0.5,
            smooth_coef: 0.5,
            failure_penalty: -10.0,
            success_reward: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub dt: f64,
    pub v_max: f64,
    pub detection_range: f64,
    pub wheelbase: f64,
    pub max_steer_angle: f64,
    pub max_accel: f64,
    pub max_decel: f64,
    pub drag: f64,
    pub speed_cap_factor: f64,
    pub ego_radius: f64,
    pub road_half_width: f64,
    pub lateral_threshold: f64,
    pub intersection_widening: f64,
    /// Multiplies the lateral threshold in evaluation mode.
    pub eval_threshold_factor: f64,
    pub blocked_speed: f64,
    pub blocked_steps: u32,
    pub rule_speed: f64,
    /// Seconds before a light turns red during which it already counts as a
    /// stop signal for hazard detection; crossing is only penalized on red.
    pub amber_time: f64,
    pub lookahead: f64,
    pub max_episode_steps: u32,
    pub completion_radius: f64,
    pub grid_size: usize,
    pub grid_resolution: f64,
    pub mode: EnvMode,
    pub soft_reset_prob: f64,
    pub soft_reset_return_limit: f64,
    pub vehicles: usize,
    pub pedestrians: usize,
    pub reward: RewardConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            v_max: 6.0,
            detection_range: 20.0,
            wheelbase: 2.5,
            max_steer_angle: 0.5,
            max_accel: 3.0,
            max_decel: 6.0,
            drag: 0.3,
            speed_cap_factor: 1.5,
            ego_radius: 1.0,
            road_half_width: 3.5,
            lateral_threshold: 2.0,
            intersection_widening: 1.5,
            eval_threshold_factor: 0.75,
            blocked_speed: 0.1,
            blocked_steps: 100,
            rule_speed: 0.1,
            amber_time: 3.0,
            lookahead: 6.0,
            max_episode_steps: 1000,
            completion_radius: 3.0,
            grid_size: 48,
            grid_resolution: 0.5,
            mode: EnvMode::Train,
            soft_reset_prob: 0.25,
            soft_reset_return_limit: 100.0,
            vehicles: 2,
            pedestrians: 1,
            reward: RewardConfig::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::InvalidConfig(m.to_string()));
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if !(self.v_max > 0.0) {
            return bad("v_max must be positive");
        }
        if !(self.detection_range > 0.0) {
            return bad("detection_range must be positive");
        }
        if !(self.lateral_threshold > 0.0) {
            return bad("lateral_threshold must be positive");
        }
        if !(0.0..=1.0).contains(&self.soft_reset_prob) {
            return bad("soft_reset_prob must be in [0, 1]");
        }
        if self.grid_size > 0 && !(self.grid_resolution > 0.0) {
            return bad("grid_resolution must be positive");
        }
        if self.max_episode_steps == 0 {
            return bad("max_episode_steps must be positive");
        }
        if !(self.amber_time >= 0.0) {
            return bad("amber_time must be non-negative");
        }
        Ok(())
    }

    pub fn grid_shape(&self) -> GridShape {
        GridShape::new(self.grid_size)
    }

    /// Obstacle-aware desired speed: `v_max` when nothing is detected, falling
    /// linearly to zero as the gap to the hazard closes.
    pub fn desired_speed(&self, dist_to_obstacle: Option<f64>) -> Result<f64, EnvError> {
        match dist_to_obstacle {
            None => Ok(self.v_max),
            Some(d) if d < 0.0 || d.is_nan() => Err(EnvError::NegativeDistance(d)),
            Some(d) => Ok(self.v_max * (d / self.detection_range).min(1.0)),
        }
    }

    /// Hybrid reset policy: soft with probability `soft_reset_prob` while the
    /// previous episode's return is below `soft_reset_return_limit`.
    pub fn choose_soft_reset(&self, last_return: f64, uniform_draw: f64) -> bool {
        last_return < self.soft_reset_return_limit && uniform_draw < self.soft_reset_prob
    }
}
