use serde::{Deserialize, Serialize};

use super::{Grid, Obstacle, ObstacleKind, Point, RouteSpec};

/// Channel semantics of the rendered grid.
pub mod channel {
    pub const DRIVABLE: usize = 0;
    pub const ROUTE: usize = 1;
    pub const VEHICLES: usize = 2;
    pub const PEDESTRIANS: usize = 3;
    pub const RULE_MARKERS: usize = 4;
    pub const EGO: usize = 5;
    pub const COUNT: usize = 6;
}

/// Square ego-centric grid. A size of zero disables rendering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape {
    pub size: usize,
    pub channels: usize,
}

impl GridShape {
    pub fn new(size: usize) -> Self {
        Self { size, channels: if size == 0 { 0 } else { channel::COUNT } }
    }

    pub fn len(&self) -> usize {
        self.size * self.size * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub(super) struct Scene<'a> {
    pub ego: Point,
    pub heading: f64,
    pub ego_radius: f64,
    pub route: &'a RouteSpec,
    pub segment_hint: usize,
    pub obstacles: &'a [Obstacle],
    pub active_stop_lines: &'a [f64],
    pub road_half_width: f64,
}

fn seg_dist(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let t = (((p.x - a.x) * dx + (p.y - a.y) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    p.dist(&Point::new(a.x + t * dx, a.y + t * dy))
}

pub(super) fn render(shape: GridShape, resolution: f64, scene: &Scene<'_>) -> Grid {
    if shape.is_empty() {
        return Grid::empty();
    }
    let n = shape.size;
    let mut grid = Grid::zeros(shape);
    let plane = n * n;
    let ego_row = (n as f64) * 0.75;
    let ego_col = (n as f64) * 0.5;
    let (c, s) = (scene.heading.cos(), scene.heading.sin());
    let view = n as f64 * resolution + scene.road_half_width;

    let wps = scene.route.waypoints();
    let lo = scene.segment_hint.saturating_sub(40);
    let hi = (scene.segment_hint + 60).min(scene.route.num_segments());
    let segs: Vec<(Point, Point)> = (lo..hi)
        .map(|i| (wps[i], wps[i + 1]))
        .filter(|(a, b)| a.dist(&scene.ego) < view || b.dist(&scene.ego) < view)
        .collect();
    let stop_pts: Vec<(Point, f64)> = scene
        .active_stop_lines
        .iter()
        .map(|&sl| (scene.route.point_at(sl), scene.route.heading_at(sl)))
        .collect();

    for r in 0..n {
        for col in 0..n {
            let fwd = (ego_row - r as f64 - 0.5) * resolution;
            let left = (ego_col - col as f64 - 0.5) * resolution;
            let p = Point::new(scene.ego.x + fwd * c - left * s, scene.ego.y + fwd * s + left * c);
            let idx = r * n + col;
            let d = segs.iter().map(|(a, b)| seg_dist(p, *a, *b)).fold(f64::INFINITY, f64::min);
            if d <= scene.road_half_width {
                grid.data[channel::DRIVABLE * plane + idx] = 255;
            }
            if d <= 0.5 {
                grid.data[channel::ROUTE * plane + idx] = 255;
            }
            for o in scene.obstacles {
                if p.dist(&o.position) <= o.radius {
                    let ch = match o.kind {
                        ObstacleKind::Vehicle => channel::VEHICLES,
                        ObstacleKind::Pedestrian => channel::PEDESTRIANS,
                    };
                    grid.data[ch * plane + idx] = 255;
                }
            }
            for (q, h) in &stop_pts {
                let (dx, dy) = (p.x - q.x, p.y - q.y);
                let along = dx * h.cos() + dy * h.sin();
                let across = -dx * h.sin() + dy * h.cos();
                if along.abs() <= 0.5 && across.abs() <= scene.road_half_width {
                    grid.data[channel::RULE_MARKERS * plane + idx] = 255;
                }
            }
            if p.dist(&scene.ego) <= scene.ego_radius {
                grid.data[channel::EGO * plane + idx] = 255;
            }
        }
    }
    grid
}
