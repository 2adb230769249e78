use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{wrap_angle, EnvError, Point};

/// High-level navigation command attached to every route segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    TurnLeft,
    TurnRight,
    GoStraight,
    FollowLane,
    ChangeLeft,
    ChangeRight,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Self::TurnLeft,
        Self::TurnRight,
        Self::GoStraight,
        Self::FollowLane,
        Self::ChangeLeft,
        Self::ChangeRight,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::TurnLeft => "turn-left",
            Self::TurnRight => "turn-right",
            Self::GoStraight => "go-straight",
            Self::FollowLane => "follow-lane",
            Self::ChangeLeft => "change-left",
            Self::ChangeRight => "change-right",
        }
    }

    /// Segments carrying these commands are inside an intersection.
    pub fn is_intersection(self) -> bool {
        matches!(self, Self::TurnLeft | Self::TurnRight | Self::GoStraight)
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown command '{s}'"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleZoneKind {
    TrafficLight { green: f64, red: f64, offset: f64 },
    StopSign,
}

/// Stop line located at arc length `s` along the route.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuleZone {
    pub s: f64,
    pub kind: RuleZoneKind,
}

impl RuleZone {
    /// Whether a traffic light shows red at time `t` (seconds). Stop signs are
    /// stateful and handled by the simulator.
    pub fn is_red(&self, t: f64) -> bool {
        match self.kind {
            RuleZoneKind::TrafficLight { green, red, offset } => {
                let phase = (t + offset).rem_euclid(green + red);
                phase >= green
            }
            RuleZoneKind::StopSign => false,
        }
    }

    /// Red now, or turning red within `amber` seconds.
    pub fn is_red_or_amber(&self, t: f64, amber: f64) -> bool {
        match self.kind {
            RuleZoneKind::TrafficLight { green, red, offset } => {
                let phase = (t + offset).rem_euclid(green + red);
                phase >= green - amber.min(green)
            }
            RuleZoneKind::StopSign => false,
        }
    }
}

/// Polyline route with one command per segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteSpec {
    waypoints: Vec<Point>,
    commands: Vec<Command>,
    cumulative: Vec<f64>,
    total_length: f64,
    rule_zones: Vec<RuleZone>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RouteProjection {
    pub segment: usize,
    /// Arc length of the projected point.
    pub s: f64,
    /// Signed lateral offset, positive to the left of the direction of travel.
    pub lateral: f64,
    pub heading: f64,
}

impl RouteSpec {
    pub fn new(waypoints: Vec<Point>, commands: Vec<Command>) -> Result<Self, EnvError> {
        Self::with_zones(waypoints, commands, Vec::new())
    }

    pub fn with_zones(
        waypoints: Vec<Point>,
        commands: Vec<Command>,
        mut rule_zones: Vec<RuleZone>,
    ) -> Result<Self, EnvError> {
        if waypoints.len() < 2 {
            return Err(EnvError::InvalidRoute(format!(
                "need at least 2 waypoints, got {}",
                waypoints.len()
            )));
        }
        if commands.len() != waypoints.len() - 1 {
            return Err(EnvError::InvalidRoute(format!(
                "{} segments but {} commands",
                waypoints.len() - 1,
                commands.len()
            )));
        }
        let mut cumulative = Vec::with_capacity(waypoints.len());
        cumulative.push(0.0);
        for (i, w) in waypoints.windows(2).enumerate() {
            if !(w[0].x.is_finite() && w[0].y.is_finite() && w[1].x.is_finite() && w[1].y.is_finite()) {
                return Err(EnvError::InvalidRoute("non-finite waypoint".into()));
            }
            let len = w[0].dist(&w[1]);
            if len < 1e-9 {
                return Err(EnvError::InvalidRoute(format!("segment {i} has zero length")));
            }
            cumulative.push(cumulative[i] + len);
        }
        let total_length = *cumulative.last().unwrap();
        for z in &rule_zones {
            if !(0.0..=total_length).contains(&z.s) {
                return Err(EnvError::InvalidRoute(format!("rule zone at s={} is off the route", z.s)));
            }
            if let RuleZoneKind::TrafficLight { green, red, .. } = z.kind {
                if !(green > 0.0 && red > 0.0) {
                    return Err(EnvError::InvalidRoute("traffic light phases must be positive".into()));
                }
            }
        }
        rule_zones.sort_by(|a, b| a.s.total_cmp(&b.s));
        Ok(Self { waypoints, commands, cumulative, total_length, rule_zones })
    }

    /// A straight follow-lane route along +x.
    pub fn straight(length: f64) -> Self {
        let n = (length / 2.0).ceil().max(1.0) as usize;
        let pts = (0..=n).map(|i| Point::new(length * i as f64 / n as f64, 0.0)).collect();
        Self::new(pts, vec![Command::FollowLane; n]).expect("straight route is valid")
    }

    pub fn waypoints(&self) -> &[Point] {
        &self.waypoints
    }

    pub fn commands(&self) -> &[Command] {
        &self.commands
    }

    pub fn total_length(&self) -> f64 {
        self.total_length
    }

    pub fn rule_zones(&self) -> &[RuleZone] {
        &self.rule_zones
    }

    pub fn num_segments(&self) -> usize {
        self.commands.len()
    }

    pub fn segment_heading(&self, seg: usize) -> f64 {
        let a = self.waypoints[seg];
        let b = self.waypoints[seg + 1];
        (b.y - a.y).atan2(b.x - a.x)
    }

    pub fn segment_at(&self, s: f64) -> usize {
        let s = s.clamp(0.0, self.total_length);
        match self.cumulative.binary_search_by(|c| c.total_cmp(&s)) {
            Ok(i) => i.min(self.num_segments() - 1),
            Err(i) => (i - 1).min(self.num_segments() - 1),
        }
    }

    pub fn command_at(&self, s: f64) -> Command {
        self.commands[self.segment_at(s)]
    }

    pub fn point_at(&self, s: f64) -> Point {
        let seg = self.segment_at(s);
        let a = self.waypoints[seg];
        let b = self.waypoints[seg + 1];
        let len = self.cumulative[seg + 1] - self.cumulative[seg];
        let t = ((s.clamp(0.0, self.total_length) - self.cumulative[seg]) / len).clamp(0.0, 1.0);
        Point::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y))
    }

    pub fn heading_at(&self, s: f64) -> f64 {
        self.segment_heading(self.segment_at(s))
    }

    fn project_segment(&self, p: Point, seg: usize) -> (f64, RouteProjection) {
        let a = self.waypoints[seg];
        let b = self.waypoints[seg + 1];
        let (dx, dy) = (b.x - a.x, b.y - a.y);
        let len2 = dx * dx + dy * dy;
        let t = (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0);
        let q = Point::new(a.x + t * dx, a.y + t * dy);
        let dist = p.dist(&q);
        let cross = dx * (p.y - a.y) - dy * (p.x - a.x);
        let lateral = if cross >= 0.0 { dist } else { -dist };
        let s = self.cumulative[seg] + t * len2.sqrt();
        (dist, RouteProjection { segment: seg, s, lateral, heading: dy.atan2(dx) })
    }

    /// Nearest point on the route. With a `hint`, only a window of segments
    /// around the hint is searched so progress cannot jump across loops.
    pub fn project(&self, p: Point, hint: Option<usize>) -> RouteProjection {
        let n = self.num_segments();
        let (lo, hi) = match hint {
            Some(h) => (h.saturating_sub(2), (h + 40).min(n)),
            None => (0, n),
        };
        let mut best: Option<(f64, RouteProjection)> = None;
        for seg in lo..hi {
            let cand = self.project_segment(p, seg);
            if best.as_ref().map_or(true, |b| cand.0 < b.0 - 1e-12) {
                best = Some(cand);
            }
        }
        best.expect("route has at least one segment").1
    }

    /// Parses the text route format: one waypoint per line as `x y command-id`.
    /// Lines starting with `#` are comments; `@light s green red offset` and
    /// `@stop s` declare stop lines. The command on the last waypoint is ignored.
    pub fn parse(text: &str) -> Result<Self, EnvError> {
        let mut pts = Vec::new();
        let mut cmds = Vec::new();
        let mut zones = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |m: &str| EnvError::RouteFile(format!("line {}: {m}", lineno + 1));
            let fields: Vec<&str> = line.split_whitespace().collect();
            let num = |i: usize| -> Result<f64, EnvError> {
                fields
                    .get(i)
                    .ok_or_else(|| err("missing field"))?
                    .parse::<f64>()
                    .map_err(|_| err("bad number"))
            };
            match fields[0] {
                "@light" => zones.push(RuleZone {
                    s: num(1)?,
                    kind: RuleZoneKind::TrafficLight { green: num(2)?, red: num(3)?, offset: num(4)? },
                }),
                "@stop" => zones.push(RuleZone { s: num(1)?, kind: RuleZoneKind::StopSign }),
                _ => {
                    if fields.len() != 3 {
                        return Err(err("expected `x y command-id`"));
                    }
                    let id: u8 = fields[2].parse().map_err(|_| err("bad command id"))?;
                    let cmd = Command::from_id(id).ok_or_else(|| err("command id out of range"))?;
                    pts.push(Point::new(num(0)?, num(1)?));
                    cmds.push(cmd);
                }
            }
        }
        cmds.pop();
        Self::with_zones(pts, cmds, zones)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# x y command-id\n");
        for z in &self.rule_zones {
            match z.kind {
                RuleZoneKind::TrafficLight { green, red, offset } => {
                    out.push_str(&format!("@light {} {} {} {}\n", z.s, green, red, offset))
                }
                RuleZoneKind::StopSign => out.push_str(&format!("@stop {}\n", z.s)),
            }
        }
        for (i, p) in self.waypoints.iter().enumerate() {
            let cmd = self.commands.get(i).or(self.commands.last()).unwrap();
            out.push_str(&format!("{} {} {}\n", p.x, p.y, cmd.id()));
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self, EnvError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EnvError::RouteFile(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), EnvError> {
        std::fs::write(path, self.to_text())
            .map_err(|e| EnvError::RouteFile(format!("{}: {e}", path.display())))
    }
}

/// Procedural route generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RouteGenerator {
    pub length: f64,
    pub spacing: f64,
    pub turn_radius: f64,
    pub turn_prob: f64,
    pub lane_change_prob: f64,
    pub light_prob: f64,
    pub stop_prob: f64,
    pub lane_width: f64,
}

impl Default for RouteGenerator {
    fn default() -> Self {
        Self {
            length: 300.0,
            spacing: 2.0,
            turn_radius: 12.0,
            turn_prob: 0.35,
            lane_change_prob: 0.15,
            light_prob: 0.3,
            stop_prob: 0.15,
            lane_width: 3.5,
        }
    }
}

struct Builder {
    pts: Vec<Point>,
    cmds: Vec<Command>,
    heading: f64,
    spacing: f64,
}

impl Builder {
    fn pos(&self) -> Point {
        *self.pts.last().unwrap()
    }

    fn straight(&mut self, len: f64, cmd: Command) {
        let n = (len / self.spacing).ceil().max(1.0) as usize;
        let step = len / n as f64;
        for _ in 0..n {
            let p = self.pos();
            self.pts.push(Point::new(p.x + step * self.heading.cos(), p.y + step * self.heading.sin()));
            self.cmds.push(cmd);
        }
    }

    fn arc(&mut self, radius: f64, angle: f64, cmd: Command) {
        let arc_len = radius * angle.abs();
        let n = (arc_len / self.spacing).ceil().max(2.0) as usize;
        let dpsi = angle / n as f64;
        let chord = 2.0 * radius * (dpsi.abs() / 2.0).sin();
        for _ in 0..n {
            let mid = self.heading + dpsi / 2.0;
            let p = self.pos();
            self.pts.push(Point::new(p.x + chord * mid.cos(), p.y + chord * mid.sin()));
            self.cmds.push(cmd);
            self.heading = wrap_angle(self.heading + dpsi);
        }
    }

    fn lane_change(&mut self, offset: f64, len: f64, cmd: Command) {
        let n = (len / self.spacing).ceil().max(2.0) as usize;
        let (c, s) = (self.heading.cos(), self.heading.sin());
        let start = self.pos();
        for i in 1..=n {
            let t = i as f64 / n as f64;
            let along = len * t;
            let lat = offset * (1.0 - (PI * t).cos()) / 2.0;
            self.pts.push(Point::new(start.x + along * c - lat * s, start.y + along * s + lat * c));
            self.cmds.push(cmd);
        }
    }

    fn length(&self) -> f64 {
        self.pts.windows(2).map(|w| w[0].dist(&w[1])).sum()
    }
}

impl RouteGenerator {
    /// A route with curves only (no intersections or stop lines).
    pub fn curvy(length: f64) -> Self {
        Self { length, light_prob: 0.0, stop_prob: 0.0, lane_change_prob: 0.2, ..Self::default() }
    }

    pub fn generate(&self, seed: u64) -> RouteSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_a0_7e);
        let mut b = Builder {
            pts: vec![Point::new(0.0, 0.0)],
            cmds: Vec::new(),
            heading: 0.0,
            spacing: self.spacing,
        };
        let mut zones = Vec::new();
        b.straight(20.0, Command::FollowLane);
        while b.length() < self.length {
            let u: f64 = rng.gen();
            if u < self.turn_prob {
                let enter_s = b.length();
                let left = rng.gen_bool(0.5);
                let angle = if left { FRAC_PI_2 } else { -FRAC_PI_2 };
                let cmd = if left { Command::TurnLeft } else { Command::TurnRight };
                b.arc(self.turn_radius, angle, cmd);
                self.maybe_zone(&mut rng, enter_s, &mut zones);
            } else if u < self.turn_prob + self.lane_change_prob {
                let left = rng.gen_bool(0.5);
                let (off, cmd) = if left {
                    (self.lane_width, Command::ChangeLeft)
                } else {
                    (-self.lane_width, Command::ChangeRight)
                };
                b.lane_change(off, 24.0, cmd);
            } else if u < self.turn_prob + self.lane_change_prob + 0.15 {
                let enter_s = b.length();
                b.straight(14.0, Command::GoStraight);
                self.maybe_zone(&mut rng, enter_s, &mut zones);
            } else {
                let len = rng.gen_range(15.0..35.0);
                b.straight(len, Command::FollowLane);
            }
            b.straight(12.0, Command::FollowLane);
        }
        RouteSpec::with_zones(b.pts, b.cmds, zones).expect("generated route is valid")
    }

    fn maybe_zone(&self, rng: &mut ChaCha8Rng, s: f64, zones: &mut Vec<RuleZone>) {
        if s < 15.0 {
            return;
        }
        let u: f64 = rng.gen();
        if u < self.light_prob {
            zones.push(RuleZone {
                s,
                kind: RuleZoneKind::TrafficLight { green: 6.0, red: 4.0, offset: rng.gen_range(0.0..10.0) },
            });
        } else if u < self.light_prob + self.stop_prob {
            zones.push(RuleZone { s, kind: RuleZoneKind::StopSign });
        }
    }
}
