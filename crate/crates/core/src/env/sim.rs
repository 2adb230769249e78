use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::render::{render, Scene};
use super::route::{RouteSpec, RuleZoneKind};
use super::{
    state_index as si, wrap_angle, Action2D, EgoState, EnvConfig, EnvError, EnvMode, Infractions,
    Obstacle, ObstacleKind, Observation, Point, RewardTerms, SpeedBin, StepInfo, TerminationEvent,
    STATE_DIM,
};

/// Distance before a stop sign inside which a full stop clears the sign.
const STOP_SIGN_WINDOW: f64 = 5.0;

#[derive(Debug, Clone, Copy)]
struct Hazards {
    /// Gap to the nearest obstacle in the lane ahead.
    obstacle_gap: Option<f64>,
    /// Gap to the next active stop line.
    rule_gap: Option<f64>,
}

impl Hazards {
    fn nearest(&self) -> Option<f64> {
        match (self.obstacle_gap, self.rule_gap) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }
}

/// Single-threaded simulator instance. `Send`, so it can move between rollout
/// workers between steps.
#[derive(Debug, Clone)]
pub struct KineticEnv {
    cfg: EnvConfig,
    route: Option<RouteSpec>,
    ego: EgoState,
    obstacles: Vec<Obstacle>,
    segment: usize,
    s: f64,
    lateral: f64,
    route_heading: f64,
    progress: f64,
    time: f64,
    steps: u32,
    stopped_steps: u32,
    stop_cleared: Vec<bool>,
    distance: f64,
    done: bool,
}

impl KineticEnv {
    pub fn new(cfg: EnvConfig) -> Result<Self, EnvError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            route: None,
            ego: EgoState { position: Point::default(), heading: 0.0, speed: 0.0, last_longitudinal: 0.0, last_steer: 0.0 },
            obstacles: Vec::new(),
            segment: 0,
            s: 0.0,
            lateral: 0.0,
            route_heading: 0.0,
            progress: 0.0,
            time: 0.0,
            steps: 0,
            stopped_steps: 0,
            stop_cleared: Vec::new(),
            distance: 0.0,
            done: false,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn set_mode(&mut self, mode: EnvMode) {
        self.cfg.mode = mode;
    }

    pub fn route(&self) -> Option<&RouteSpec> {
        self.route.as_ref()
    }

    pub fn ego(&self) -> &EgoState {
        &self.ego
    }

    pub fn obstacles(&self) -> &[Obstacle] {
        &self.obstacles
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn route_completion(&self) -> f64 {
        self.route.as_ref().map_or(0.0, |r| (self.progress / r.total_length()).clamp(0.0, 1.0))
    }

    /// Replaces the background actors. Intended for scripted scenarios.
    pub fn set_obstacles(&mut self, obstacles: Vec<Obstacle>) {
        self.obstacles = obstacles;
    }

    /// Overrides the ego state and re-projects it onto the route.
    pub fn set_ego(&mut self, ego: EgoState) -> Observation {
        self.ego = ego;
        if let Some(route) = &self.route {
            let p = route.project(ego.position, None);
            self.apply_projection(p.segment, p.s, p.lateral, p.heading);
            self.progress = self.progress.max(p.s);
        }
        self.observe()
    }

    fn apply_projection(&mut self, seg: usize, s: f64, lateral: f64, heading: f64) {
        self.segment = seg;
        self.s = s;
        self.lateral = lateral;
        self.route_heading = heading;
    }

    /// Starts an episode. A soft reset only teleports the ego back to the start
    /// of the route and keeps background actors and light phases as they are; a
    /// hard reset rebuilds them from `seed`.
    pub fn reset(&mut self, seed: u64, route: &RouteSpec, soft: bool) -> Result<Observation, EnvError> {
        if route.waypoints().len() < 2 || route.total_length() <= 0.0 {
            return Err(EnvError::InvalidRoute("route must have at least two waypoints".into()));
        }
        let same_route = self.route.as_ref() == Some(route);
        let soft = soft && same_route;
        if !soft {
            self.route = Some(route.clone());
            self.obstacles = spawn_obstacles(&self.cfg, route, seed);
            self.time = 0.0;
        }
        let route = self.route.as_ref().unwrap();
        let start = route.waypoints()[0];
        let heading = route.segment_heading(0);
        self.ego = EgoState { position: start, heading, speed: 0.0, last_longitudinal: 0.0, last_steer: 0.0 };
        self.stop_cleared = vec![false; route.rule_zones().len()];
        self.apply_projection(0, 0.0, 0.0, heading);
        self.progress = 0.0;
        self.steps = 0;
        self.stopped_steps = 0;
        self.distance = 0.0;
        self.done = false;
        Ok(self.observe())
    }

    fn lateral_threshold(&self, route: &RouteSpec) -> f64 {
        let mut th = self.cfg.lateral_threshold;
        if route.commands()[self.segment].is_intersection() {
            th *= self.cfg.intersection_widening;
        }
        if self.cfg.mode == EnvMode::Eval {
            th *= self.cfg.eval_threshold_factor;
        }
        th
    }

    fn zone_active(&self, idx: usize) -> bool {
        let route = self.route.as_ref().unwrap();
        let z = route.rule_zones()[idx];
        match z.kind {
            RuleZoneKind::TrafficLight { .. } => z.is_red_or_amber(self.time, self.cfg.amber_time),
            RuleZoneKind::StopSign => !self.stop_cleared[idx],
        }
    }

    fn hazards(&self) -> Hazards {
        let route = self.route.as_ref().unwrap();
        let range = self.cfg.detection_range;
        let mut obstacle_gap: Option<f64> = None;
        for o in &self.obstacles {
            if o.position.dist(&self.ego.position) > range + 10.0 {
                continue;
            }
            let p = route.project(o.position, Some(self.segment));
            let ahead = p.s - self.s;
            if ahead <= 0.0 || (p.lateral - self.lateral).abs() > o.radius + self.cfg.ego_radius + 0.5 {
                continue;
            }
            let gap = (ahead - o.radius - self.cfg.ego_radius).max(0.0);
            if gap < range {
                obstacle_gap = Some(obstacle_gap.map_or(gap, |g: f64| g.min(gap)));
            }
        }
        let mut rule_gap = None;
        for (i, z) in route.rule_zones().iter().enumerate() {
            let ahead = z.s - self.s;
            if ahead >= 0.0 && ahead < range && self.zone_active(i) {
                rule_gap = Some((ahead - self.cfg.ego_radius).max(0.0));
                break;
            }
        }
        Hazards { obstacle_gap, rule_gap }
    }

    pub fn active_stop_lines(&self) -> Vec<f64> {
        let Some(route) = &self.route else { return Vec::new() };
        (0..route.rule_zones().len())
            .filter(|&i| self.zone_active(i))
            .map(|i| route.rule_zones()[i].s)
            .collect()
    }

    fn desired_speed_now(&self) -> f64 {
        self.cfg.desired_speed(self.hazards().nearest()).unwrap_or(0.0)
    }

    pub fn observe(&self) -> Observation {
        let route = self.route.as_ref().expect("observe after reset");
        let cfg = &self.cfg;
        let hz = self.hazards();
        let mut v = [0.0; STATE_DIM];
        v[si::SPEED] = self.ego.speed / cfg.v_max;
        v[si::LAST_LONGITUDINAL] = self.ego.last_longitudinal;
        v[si::LAST_STEER] = self.ego.last_steer;
        v[si::LATERAL] = self.lateral / self.lateral_threshold(route);
        v[si::HEADING_ERROR] = wrap_angle(self.ego.heading - self.route_heading) / std::f64::consts::PI;
        let la = route.point_at(self.s + cfg.lookahead);
        let bearing = wrap_angle((la.y - self.ego.position.y).atan2(la.x - self.ego.position.x) - self.ego.heading);
        v[si::LOOKAHEAD_BEARING] = bearing / std::f64::consts::PI;
        v[si::DESIRED_SPEED] = cfg.desired_speed(hz.nearest()).unwrap_or(0.0) / cfg.v_max;
        v[si::HAZARD_PROXIMITY] = hz.nearest().map_or(0.0, |g| 1.0 - g / cfg.detection_range);
        v[si::RULE_ACTIVE] = if hz.rule_gap.is_some() { 1.0 } else { 0.0 };
        v[si::RULE_DISTANCE] = hz.rule_gap.map_or(1.0, |g| (g / cfg.detection_range).min(1.0));

        let stops = self.active_stop_lines();
        let grid = render(
            cfg.grid_shape(),
            cfg.grid_resolution,
            &Scene {
                ego: self.ego.position,
                heading: self.ego.heading,
                ego_radius: cfg.ego_radius,
                route,
                segment_hint: self.segment,
                obstacles: &self.obstacles,
                active_stop_lines: &stops,
                road_half_width: cfg.road_half_width,
            },
        );
        Observation { grid, state_vec: v }
    }

    pub fn speed_bin(&self) -> SpeedBin {
        crate::shaping::discretize_speed(self.ego.speed).unwrap_or(SpeedBin::Stopped)
    }

    /// Advances the simulation by one control period.
    pub fn step(&mut self, action: Action2D) -> Result<(Observation, f64, bool, TerminationEvent, StepInfo), EnvError> {
        if self.route.is_none() {
            return Err(EnvError::NotReset);
        }
        if self.done {
            return Err(EnvError::EpisodeDone);
        }
        let a = action.clamped();
        let cfg = self.cfg.clone();
        let dt = cfg.dt;

        // Longitudinal dynamics.
        let accel = if a.longitudinal >= 0.0 {
            a.longitudinal * cfg.max_accel
        } else {
            a.longitudinal * cfg.max_decel
        };
        let drag = if self.ego.speed > 0.0 { cfg.drag } else { 0.0 };
        let v = (self.ego.speed + (accel - drag) * dt).clamp(0.0, cfg.v_max * cfg.speed_cap_factor);

        // Kinematic bicycle, positive steer turns right.
        let delta = -a.steer * cfg.max_steer_angle;
        let heading = wrap_angle(self.ego.heading + v / cfg.wheelbase * delta.tan() * dt);
        let pos = Point::new(
            self.ego.position.x + v * heading.cos() * dt,
            self.ego.position.y + v * heading.sin() * dt,
        );
        let prev_steer = self.ego.last_steer;
        self.ego = EgoState { position: pos, heading, speed: v, last_longitudinal: a.longitudinal, last_steer: a.steer };
        self.distance += v * dt;
        for o in &mut self.obstacles {
            o.position.x += o.velocity.x * dt;
            o.position.y += o.velocity.y * dt;
        }
        self.time += dt;
        self.steps += 1;

        let prev_s = self.s;
        let route = self.route.take().unwrap();
        let p = route.project(pos, Some(self.segment));
        self.apply_projection(p.segment, p.s, p.lateral, p.heading);
        self.progress = self.progress.max(p.s);

        if v < cfg.blocked_speed {
            self.stopped_steps += 1;
        } else {
            self.stopped_steps = 0;
        }

        // Stop signs clear once the ego has stopped just before the line.
        for (i, z) in route.rule_zones().iter().enumerate() {
            if matches!(z.kind, RuleZoneKind::StopSign)
                && v < cfg.rule_speed
                && (0.0..=STOP_SIGN_WINDOW).contains(&(z.s - self.s))
            {
                self.stop_cleared[i] = true;
            }
        }

        let mut infractions = Infractions::default();
        let mut event = TerminationEvent::None;

        for o in &self.obstacles {
            if o.position.dist(&pos) < o.radius + cfg.ego_radius {
                match o.kind {
                    ObstacleKind::Vehicle => infractions.collision_vehicle += 1,
                    ObstacleKind::Pedestrian => infractions.collision_pedestrian += 1,
                }
                event = TerminationEvent::Collision;
            }
        }
        for (i, z) in route.rule_zones().iter().enumerate() {
            if prev_s < z.s && z.s <= self.s && v > cfg.rule_speed {
                match z.kind {
                    RuleZoneKind::TrafficLight { .. } if z.is_red(self.time) => {
                        infractions.red_light += 1;
                        if event == TerminationEvent::None {
                            event = TerminationEvent::RedLight;
                        }
                    }
                    RuleZoneKind::StopSign if !self.stop_cleared[i] => {
                        infractions.stop_sign += 1;
                        if event == TerminationEvent::None {
                            event = TerminationEvent::StopSign;
                        }
                    }
                    _ => {}
                }
            }
        }
        self.route = Some(route);
        let route = self.route.as_ref().unwrap();
        let threshold = self.lateral_threshold(route);
        let end = *route.waypoints().last().unwrap();
        if event == TerminationEvent::None {
            let near_end = pos.dist(&end) <= cfg.completion_radius
                && self.progress >= route.total_length() - 2.0 * cfg.completion_radius;
            event = if self.lateral.abs() > threshold {
                TerminationEvent::RouteDeviation
            } else if self.stopped_steps >= cfg.blocked_steps {
                TerminationEvent::Blocked
            } else if near_end && cfg.mode == EnvMode::Eval {
                TerminationEvent::RouteCompleted
            } else if near_end || self.steps >= cfg.max_episode_steps {
                TerminationEvent::Timeout
            } else {
                TerminationEvent::None
            };
        }

        let desired = self.desired_speed_now();
        let heading_err = wrap_angle(heading - self.route_heading);
        let r = &cfg.reward;
        let terms = RewardTerms {
            speed: 1.0 - (v - desired).abs() / cfg.v_max,
            lateral: -r.lateral_coef * self.lateral * self.lateral,
            heading: -r.heading_coef * heading_err.abs(),
            smooth: -r.smooth_coef * (a.steer - prev_steer).powi(2),
            terminal: if event.is_failure() {
                r.failure_penalty
            } else if event == TerminationEvent::RouteCompleted {
                r.success_reward
            } else {
                0.0
            },
        };
        let reward = terms.total();
        let done = event != TerminationEvent::None;
        self.done = done;
        let obs = self.observe();
        let command = route.commands()[self.segment];
        let info = StepInfo {
            route_completion: self.route_completion(),
            env_reward: reward,
            reward_terms: terms,
            desired_speed: desired,
            command,
            speed_bin: self.speed_bin(),
            infractions,
            speed: v,
            distance_travelled: self.distance,
        };
        Ok((obs, reward, done, event, info))
    }

    pub fn current_command(&self) -> super::Command {
        self.route.as_ref().map_or(super::Command::FollowLane, |r| r.commands()[self.segment])
    }
}

fn spawn_obstacles(cfg: &EnvConfig, route: &RouteSpec, seed: u64) -> Vec<Obstacle> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x0b57);
    let total = route.total_length();
    let mut out = Vec::new();
    if total < 60.0 {
        return out;
    }
    for _ in 0..cfg.vehicles {
        let s = rng.gen_range(40.0..total - 10.0);
        let p = route.point_at(s);
        let h = route.heading_at(s);
        let speed = rng.gen_range(0.6..0.9) * cfg.v_max;
        out.push(Obstacle {
            position: p,
            velocity: Point::new(speed * h.cos(), speed * h.sin()),
            radius: 1.0,
            kind: ObstacleKind::Vehicle,
        });
    }
    for _ in 0..cfg.pedestrians {
        let s = rng.gen_range(40.0..total - 10.0);
        let p = route.point_at(s);
        let h = route.heading_at(s);
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let (nx, ny) = (-h.sin() * side, h.cos() * side);
        let start = Point::new(p.x + 8.0 * nx, p.y + 8.0 * ny);
        let speed = rng.gen_range(0.5..1.5);
        out.push(Obstacle {
            position: start,
            velocity: Point::new(-nx * speed, -ny * speed),
            radius: 0.4,
            kind: ObstacleKind::Pedestrian,
        });
    }
    out
}
